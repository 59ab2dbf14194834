from pydantic import BaseModel, root_validator, validator
from typing import TYPE_CHECKING, Dict, List, Literal, Tuple

import json
import logging
import math
from pathlib import Path

import torch
from torch import Tensor

from watchtower.lookups import (
    ACTORS,
    CATEGORIES,
    CAUSES,
    DESCRIPTIONS,
    ELAPSED_BUCKETS,
    NORMAL_CAPTION,
    PLACES,
    QUERY_FAMILIES,
    QUERY_TEMPLATES,
    RESPONSE_END,
    SEVERITY,
    VAD_LEAD_WORD,
    VAP_LEAD_WORD
)
from watchtower.wt_checkpoint import stable_hash
from watchtower.wt_core_math import DTYPE, SeededRng
from watchtower.wt_errors import GenerationError, SchemaVersionError
from watchtower.wt_vision_encoder import FrameSequence

if TYPE_CHECKING:
    from watchtower.wt_stream_lm import Vocab

logger = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1


class DataConfig(BaseModel):

    '''
        Synthetic stream generator settings; all durations are in frame pairs so every
        boundary lands on an even frame
    '''

    n_frames: int = 48
    n_categories: int = 6
    event_count: Tuple[int, int] = (1, 2)
    precursor_pairs: Tuple[int, int] = (2, 5)
    anomaly_pairs: Tuple[int, int] = (3, 7)
    unpredictable_fraction: float = 0.2
    noise_sd: float = 0.3
    rho: float = 0.5
    height: int = 16
    width: int = 16
    channels: int = 4
    fps: float = 2.0
    n_train: int = 500
    n_test: int = 100
    max_retries: int = 200

    @validator("n_frames")
    def _even_frames(cls, v: int) -> int:
        if v < 4 or v % 2:
            raise ValueError(f"n_frames must be an even number >= 4, got {v}")
        return v

    @validator("n_categories")
    def _known_categories(cls, v: int) -> int:
        if not 1 <= v <= len(CATEGORIES):
            raise ValueError(f"n_categories must lie in [1, {len(CATEGORIES)}]")
        return v

    @validator("event_count", "precursor_pairs", "anomaly_pairs")
    def _ordered_range(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if v[0] < 0 or v[0] > v[1]:
            raise ValueError(f"range {v} must satisfy 0 <= low <= high")
        return v

    @validator("anomaly_pairs")
    def _anomaly_lasts(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if v[0] < 1:
            raise ValueError("anomalies last at least one frame pair")
        return v

    @validator("unpredictable_fraction")
    def _fraction(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("unpredictable_fraction must lie in [0, 1]")
        return v

    @validator("rho")
    def _precursor_scale(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        return v

    @property
    def categories(self) -> List[str]:
        return CATEGORIES[:self.n_categories]


class Event(BaseModel):

    category: str
    t_p: int
    t_n: int
    t_m: int

    @property
    def predictable(self) -> bool:
        return self.t_p < self.t_n


class EventTimeline(BaseModel):

    n_frames: int
    events: List[Event] = []

    @root_validator(skip_on_failure = True)
    def _events_fit(cls, values: dict) -> dict:

        previous_end = 0
        for e in values["events"]:
            if not (e.t_p <= e.t_n < e.t_m <= values["n_frames"]):
                raise ValueError(f"event {e} breaks t_p <= t_n < t_m <= T")
            ## every annotated frame must round up to a block the stream still delivers
            if e.t_m > values["n_frames"] - 2:
                raise ValueError(f"event {e} ends past the last whole frame pair (t_m <= {values['n_frames'] - 2})")
            if e.t_p < previous_end + 1:
                raise ValueError(f"event {e} overlaps its predecessor or leaves no normal frame before it")
            previous_end = e.t_m + 1

        return values

    def state_at(self, frame: int) -> Tuple[str, Event | None]:

        for e in self.events:
            if e.t_n <= frame <= e.t_m:
                return "anomaly", e
            if e.t_p <= frame < e.t_n:
                return "precursor", e

        return "normal", None


class ResponseRecord(BaseModel):

    task: Literal["VAP", "VAD", "CAPTION"]
    frame: int
    category: str | None
    description: List[str]
    event_index: int = -1

    def response_tokens(self) -> List[str]:

        head = [f"<{self.category}>"] if self.category else []
        return head + list(self.description) + [RESPONSE_END]


class QueryRecord(BaseModel):

    frame: int
    family: str
    query: List[str]
    answer: List[str]
    category: str
    event_index: int

    def response_tokens(self) -> List[str]:

        ## answer already opens with the category token
        return list(self.answer) + [RESPONSE_END]


class AnnotationSet(BaseModel):

    vap: List[ResponseRecord] = []
    vad: List[ResponseRecord] = []
    vaa: List[QueryRecord] = []
    captions: List[ResponseRecord] = []

    def records(self, mode: str) -> List[ResponseRecord] | List[QueryRecord]:

        return {"VAP": self.vap, "VAD": self.vad, "VAA": self.vaa, "CAPTION": self.captions}[mode]


class SignatureBank(BaseModel):

    background: Tensor
    patterns: Dict[str, Tensor]
    rho: float

    class Config:
        arbitrary_types_allowed = True


class StreamRecord(BaseModel):

    stream_id: str
    split: Literal["train", "test"]
    render_seed: int
    timeline: EventTimeline
    annotations: AnnotationSet


#########################
### TIMELINE + FRAMES ###
#########################

def gen_timeline(rng: SeededRng, config: DataConfig) -> EventTimeline:

    '''
        Rejection-samples non-overlapping events on frame-pair boundaries
            - unpredictable events get t_p = t_n (no precursor, no prediction record)
            - raises GenerationError when no valid packing turns up within max_retries
    '''

    n_pairs = config.n_frames // 2
    for _ in range(config.max_retries):

        count = rng.integers(*config.event_count)
        events = []
        for _ in range(count):

            category = config.categories[rng.integers(0, config.n_categories - 1)]
            lead = rng.integers(*config.precursor_pairs)
            length = rng.integers(*config.anomaly_pairs)
            if rng.random() < config.unpredictable_fraction:
                lead = 0

            ## onset pair leaves >= 1 normal pair before the precursor and t_m <= T - 2
            lowest, highest = 1 + lead, n_pairs - 1 - length
            if highest < lowest:
                break
            onset = rng.integers(lowest, highest)
            events.append(Event(
                category = category,
                t_p = 2 * (onset - lead),
                t_n = 2 * onset,
                t_m = 2 * (onset + length)
            ))

        if len(events) != count:
            continue

        events.sort(key = lambda e: e.t_p)
        if all(later.t_p >= earlier.t_m + 2 for earlier, later in zip(events, events[1:])):
            return EventTimeline(n_frames = config.n_frames, events = events)

    raise GenerationError(f"could not pack {config.event_count} events into {config.n_frames} frames 😩")


def make_signatures(rng: SeededRng, config: DataConfig) -> SignatureBank:

    shape = (config.height, config.width, config.channels)
    background = rng.normal(shape, 0.5)
    patterns = {c: rng.normal(shape, 1.0) for c in config.categories}

    ## learnable by construction: every pair of signatures sits far above the noise floor
    names = list(patterns)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            distance = float(torch.sqrt(((patterns[a] - patterns[b]) ** 2).mean()))
            if distance < 3 * config.noise_sd:
                raise GenerationError(f"signatures {a}/{b} too close: rms {distance:.3f}")

    return SignatureBank(background = background, patterns = patterns, rho = config.rho)


def render_frames(
    timeline: EventTimeline,
    signatures: SignatureBank,
    noise_sd: float,
    rng: SeededRng,
    fps: float = 2.0
) -> FrameSequence:

    T = timeline.n_frames
    frames = signatures.background.unsqueeze(0).repeat(T, 1, 1, 1)
    for e in timeline.events:
        pattern = signatures.patterns[e.category]
        frames[e.t_p:e.t_n] += signatures.rho * pattern
        frames[e.t_n:e.t_m + 1] += pattern

    if noise_sd > 0:
        frames = frames + rng.normal(tuple(frames.shape), noise_sd)

    return FrameSequence(frames = frames, fps = fps)


def frame_labels(timeline: EventTimeline) -> List[str]:

    return [timeline.state_at(f)[0] for f in range(timeline.n_frames)]


def probe_separability(frames: List[Tensor], labels: List[List[str]], train_fraction: float = 0.7) -> float:

    '''
        Ridge least-squares probe, anomaly (+1) vs normal (-1), precursor frames left out.
        Returns held-out accuracy.
    '''

    rows, targets = [], []
    for stream_frames, stream_labels in zip(frames, labels):
        for frame, label in zip(stream_frames, stream_labels):
            if label == "precursor":
                continue
            rows.append(frame.reshape(-1))
            targets.append(1.0 if label == "anomaly" else -1.0)

    X = torch.stack(rows).to(DTYPE)
    X = torch.cat([X, torch.ones(X.shape[0], 1, dtype = DTYPE)], dim = 1)
    y = torch.tensor(targets, dtype = DTYPE)

    cut = int(len(rows) * train_fraction)
    gram = X[:cut].T @ X[:cut] + torch.eye(X.shape[1], dtype = DTYPE)
    w = torch.linalg.solve(gram, X[:cut].T @ y[:cut])

    predictions = torch.sign(X[cut:] @ w)
    return float((predictions == y[cut:]).to(DTYPE).mean())


###################
### ANNOTATIONS ###
###################

def vad_key_frames(t_n: int, t_m: int) -> List[int]:

    stride = math.ceil((t_m - t_n + 1) / 3)
    return list(range(t_n, t_m + 1, stride))


def answer_words(family: str, category: str, elapsed_frames: int) -> List[str]:

    if family == "what":
        return ["is", *DESCRIPTIONS[category]]
    if family == "why":
        return ["caused", "by", CAUSES[category]]
    if family == "who":
        return [ACTORS[category]]
    if family == "where":
        return ["in", PLACES[category]]
    if family == "when":
        word = next(w for limit, w in ELAPSED_BUCKETS if limit is None or elapsed_frames <= limit)
        return ["started", word]
    if family == "how":
        return list(DESCRIPTIONS[category])
    if family == "how_much":
        return ["severity", SEVERITY[category]]

    raise ValueError(f"unknown query family {family!r}")


def gen_annotations(timeline: EventTimeline, vocab: "Vocab | None" = None) -> AnnotationSet:

    annotations = AnnotationSet()
    for idx, e in enumerate(timeline.events):

        if e.predictable:
            annotations.vap.append(ResponseRecord(
                task = "VAP",
                frame = e.t_p,
                category = e.category,
                description = [VAP_LEAD_WORD, *DESCRIPTIONS[e.category]],
                event_index = idx
            ))

        for frame in vad_key_frames(e.t_n, e.t_m):
            annotations.vad.append(ResponseRecord(
                task = "VAD",
                frame = frame,
                category = e.category,
                description = [VAD_LEAD_WORD, *DESCRIPTIONS[e.category]],
                event_index = idx
            ))

        query_frame = (e.t_n + e.t_m) // 2
        family = QUERY_FAMILIES[(idx + e.t_n) % len(QUERY_FAMILIES)]
        annotations.vaa.append(QueryRecord(
            frame = query_frame,
            family = family,
            query = QUERY_TEMPLATES[family],
            answer = [f"<{e.category}>", *answer_words(family, e.category, query_frame - e.t_n)],
            category = e.category,
            event_index = idx
        ))

    if vocab is not None:
        for record in [*annotations.vap, *annotations.vad, *annotations.vaa]:
            vocab.encode(record.response_tokens())

    return annotations


def caption_records(timeline: EventTimeline, every: int = 3) -> List[ResponseRecord]:

    '''
        Generic "what is on screen" captions for base-model pretraining, one per `every` pairs
    '''

    records = []
    for pair in range(0, timeline.n_frames // 2, every):
        state, event = timeline.state_at(2 * pair)
        if event is None:
            records.append(ResponseRecord(task = "CAPTION", frame = 2 * pair, category = None, description = NORMAL_CAPTION))
            continue

        lead = VAD_LEAD_WORD if state == "anomaly" else VAP_LEAD_WORD
        records.append(ResponseRecord(
            task = "CAPTION",
            frame = 2 * pair,
            category = event.category,
            description = [lead, *DESCRIPTIONS[event.category]]
        ))

    return records


###############
### DATASET ###
###############

class WT_Dataset(BaseModel):

    seed: int
    config: DataConfig
    config_hash: str
    streams: List[StreamRecord] = []

    _signatures: SignatureBank | None = None

    class Config:
        underscore_attrs_are_private = True

    @property
    def train(self) -> List[StreamRecord]:
        return [s for s in self.streams if s.split == "train"]

    @property
    def test(self) -> List[StreamRecord]:
        return [s for s in self.streams if s.split == "test"]

    def stream(self, stream_id: str) -> StreamRecord:

        for s in self.streams:
            if s.stream_id == stream_id:
                return s

        raise KeyError(f"no stream {stream_id!r} in dataset")

    @property
    def signatures(self) -> SignatureBank:

        if self._signatures is None:
            self._signatures = make_signatures(SeededRng(seed = self.seed).spawn("signatures"), self.config)

        return self._signatures

    def render(self, stream: StreamRecord) -> FrameSequence:

        return render_frames(
            stream.timeline,
            self.signatures,
            self.config.noise_sd,
            SeededRng(seed = stream.render_seed),
            fps = self.config.fps
        )

    def split_manifest(self) -> Dict:

        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "train": [s.stream_id for s in self.train],
            "test": [s.stream_id for s in self.test]
        }

    ######################
    ### USER FUNCTIONS ###
    ######################

    def serialize(self, path: str | Path) -> Path:

        path = Path(path)
        path.parent.mkdir(parents = True, exist_ok = True)
        header = {
            "schema_version": DATASET_SCHEMA_VERSION,
            "seed": self.seed,
            "config": json.loads(self.config.json()),
            "config_hash": self.config_hash
        }

        with open(path, "w", encoding = "utf-8") as fh:
            fh.write(json.dumps(header, sort_keys = True) + "\n")
            for s in self.streams:
                fh.write(s.json(exclude = {"annotations": {"captions"}}, sort_keys = True) + "\n")

        logger.info(f"Wrote {len(self.streams)} streams -> {path}")

        return path

    @classmethod
    def load(cls, path: str | Path) -> "WT_Dataset":

        with open(path, "r", encoding = "utf-8") as fh:
            lines = [line for line in fh.read().splitlines() if line.strip()]

        if not lines:
            raise SchemaVersionError(f"{path} has no header line")

        header = json.loads(lines[0])
        if header.get("schema_version") != DATASET_SCHEMA_VERSION:
            raise SchemaVersionError(
                f"{path} has dataset schema {header.get('schema_version')}, expected {DATASET_SCHEMA_VERSION}"
            )

        return cls(
            seed = header["seed"],
            config = DataConfig.parse_obj(header["config"]),
            config_hash = header["config_hash"],
            streams = [StreamRecord.parse_raw(line) for line in lines[1:]]
        )


def generate_dataset(config: DataConfig, seed: int, config_hash: str | None = None) -> WT_Dataset:

    rng = SeededRng(seed = seed)
    total = config.n_train + config.n_test
    order = rng.spawn("split").permutation(total)
    train_slots = set(order[:config.n_train])

    streams = []
    for i in range(total):
        stream_id = f"s{i:05d}"
        timeline = gen_timeline(rng.spawn(f"timeline-{stream_id}"), config)
        streams.append(StreamRecord(
            stream_id = stream_id,
            split = "train" if i in train_slots else "test",
            render_seed = rng.spawn(f"render-{stream_id}").seed,
            timeline = timeline,
            annotations = gen_annotations(timeline)
        ))

    dataset = WT_Dataset(
        seed = seed,
        config = config,
        config_hash = config_hash or stable_hash(json.loads(config.json())),
        streams = streams
    )
    ## fail fast on unlearnable signatures
    dataset.signatures

    return dataset

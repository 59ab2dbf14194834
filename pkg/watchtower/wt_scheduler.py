from pydantic import BaseModel, validator
from typing import Dict, List, Literal, Tuple

from collections import deque
import json
import logging
from pathlib import Path
from time import perf_counter

import numpy as np
import pandas as pd
import torch
from torch import Tensor

from watchtower.lookups import BOS, QUERY_END, QUERY_START, TASK_WORDS
from watchtower.wt_attention import KVCache
from watchtower.wt_errors import ConfigurationError, OrderingError, SchemaVersionError
from watchtower.wt_relation_distill import STRDModule, strd_step
from watchtower.wt_schemas import EVENT_COLUMNS, TRACE_COLUMNS, EosTraceSchema, EventLogSchema, category_or_none
from watchtower.wt_stream_lm import StreamLM, Vocab, lm_step
from watchtower.wt_vision_encoder import FrameSequence, VisionEncoder, encode_frame_pair

logger = logging.getLogger(__name__)

EVENT_LOG_SCHEMA_VERSION = 1
DEFAULT_GAMMA = {"VAP": 0.96, "VAD": 0.7, "VAA": 1.0}


class SessionConfig(BaseModel):

    mode: Literal["VAP", "VAD", "VAA"] = "VAD"
    gamma: float | None = None
    strd_cache_len: int = 256
    lm_cache_len: int = 1024
    max_response_len: int = 12

    ## False: responses decode on a throwaway copy of the LM cache, so the eos trace ignores gamma
    commit_responses: bool = True

    @validator("gamma", always = True)
    def _gamma_in_range(cls, v: float | None, values: dict) -> float:
        v = DEFAULT_GAMMA[values.get("mode", "VAD")] if v is None else v
        if not 0.0 < v <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {v}")
        return v

    @validator("max_response_len")
    def _room_to_answer(cls, v: int) -> int:
        if v < 1:
            raise ValueError("max_response_len must be >= 1")
        return v


class QueryRequest(BaseModel):

    tokens: List[str]
    t: float


class ResponseEvent(BaseModel):

    stream_id: str
    pair_index: int
    t: float
    mode: str
    trigger: Literal["eos-gate", "query"]
    eos_prob: float
    category: str | None
    tokens: List[str]
    clipped: bool = False

    def row(self) -> Dict:

        return {
            "stream_id": self.stream_id,
            "pair_index": self.pair_index,
            "t": self.t,
            "mode": self.mode,
            "trigger": self.trigger,
            "eos_prob": self.eos_prob,
            "category": self.category,
            "text": " ".join(self.tokens),
            "clipped": self.clipped
        }


class StreamRun(BaseModel):

    events: pd.DataFrame
    trace: pd.DataFrame
    pairs_per_s: float
    latency_ms: Dict[str, float]
    step_ms: List[float]

    class Config:
        arbitrary_types_allowed = True


class WT_Session:

    '''
        One online stream: encoder -> distiller -> LM per frame pair, with the EOS gate
            - P[EOS] is read at the last token of each frame block
            - a response (or a queued query) decodes greedily until </r> or max_response_len
            - frame ingestion waits while a response decodes
    '''

    def __init__(
        self,
        enc: VisionEncoder,
        strd: STRDModule | None,
        lm: StreamLM,
        vocab: Vocab,
        config: SessionConfig,
        stream_id: str = "stream",
        verbose: bool = False
    ) -> None:

        n = enc.config.n_patches
        if config.lm_cache_len < n or (strd is not None and config.strd_cache_len < n):
            raise ConfigurationError(f"cache lengths must hold at least one frame pair ({n} tokens)")

        self.enc, self.strd, self.lm, self.vocab = enc, strd, lm, vocab
        self.config = config
        self.stream_id = stream_id
        self.verbose = verbose

        self.strd_cache: KVCache | None = strd.new_cache(config.strd_cache_len) if strd is not None else None
        self.lm_cache: KVCache = lm.new_cache(config.lm_cache_len)
        self.pair_index = 0
        self.last_timestamp: float | None = None
        self.pending: deque = deque()
        self.events: List[ResponseEvent] = []
        self.trace: List[Dict] = []
        self.first_decode_probs: List[Tensor] = []

        with torch.no_grad():
            prompt = [BOS, QUERY_START, TASK_WORDS[config.mode], QUERY_END]
            lm_step(lm, self.lm_cache, lm.embed_tokens(vocab.encode(prompt)))

    ######################
    ### USER FUNCTIONS ###
    ######################

    def step_frame(self, f_prev: Tensor, f_curr: Tensor) -> ResponseEvent | None:

        n = self.enc.config.n_patches
        strd_before = self.strd_cache.position if self.strd_cache is not None else 0
        lm_before = self.lm_cache.position

        with torch.no_grad():

            block = encode_frame_pair(self.enc, f_prev, f_curr, self.pair_index)
            tokens = block.tokens if self.strd is None else strd_step(self.strd, self.strd_cache, block.tokens)
            probs = lm_step(self.lm, self.lm_cache, self.lm.projector(tokens))
            eos_prob = float(probs[-1, self.vocab.eos_id])

            self.trace.append({
                "stream_id": self.stream_id,
                "pair_index": self.pair_index,
                "t": block.timestamp,
                "eos_prob": eos_prob
            })
            self.last_timestamp = block.timestamp

            event, appended = None, 0
            if self.pending and self.pending[0].t <= block.timestamp:
                event, appended = self._answer(self.pending.popleft(), eos_prob, self.pair_index)
            elif self.config.mode != "VAA" and eos_prob < self.config.gamma:
                event, appended = self._respond("eos-gate", probs[-1], eos_prob, [], self.pair_index)

        ## every cache moves by exactly what this step fed it
        if self.strd_cache is not None and self.strd_cache.position != strd_before + n:
            raise OrderingError(f"distiller cache moved to {self.strd_cache.position}, expected {strd_before + n}")
        if self.lm_cache.position != lm_before + n + appended:
            raise OrderingError(f"LM cache moved to {self.lm_cache.position}, expected {lm_before + n + appended}")

        self.pair_index += 1
        if event is not None:
            self.events.append(event)
            if self.verbose:
                logger.info(f"{self.stream_id} t={event.t:.1f}s {event.trigger}: {event.category} {' '.join(event.tokens)}")

        return event

    def submit_query(self, tokens: List[str], t: float) -> ResponseEvent | None:

        '''
            Queues the query; it is answered right away when a frame at or after t has been
            seen, otherwise by the first later step_frame whose block timestamp reaches t
        '''

        if self.config.mode != "VAA":
            raise ConfigurationError(f"queries need a VAA session, this one runs {self.config.mode}")

        self.vocab.encode(tokens)
        self.pending.append(QueryRequest(tokens = tokens, t = t))
        if self.last_timestamp is None or self.pending[0].t > self.last_timestamp:
            return None

        with torch.no_grad():
            ## stamped with the most recent block
            event, _ = self._answer(self.pending.popleft(), self.trace[-1]["eos_prob"], self.trace[-1]["pair_index"])

        self.events.append(event)

        return event

    def run_stream(self, seq: FrameSequence, query_schedule: List[QueryRequest] | None = None) -> StreamRun:

        queries = sorted(query_schedule or [], key = lambda q: q.t)
        step_ms = []
        start = perf_counter()

        for i in range(seq.n_pairs):

            timestamp = 2 * self.pair_index / self.enc.config.fps
            while queries and queries[0].t <= timestamp:
                self.pending.append(queries.pop(0))

            tick = perf_counter()
            self.step_frame(*seq.pair(i))
            step_ms.append((perf_counter() - tick) * 1000.0)

        elapsed = perf_counter() - start

        return StreamRun(
            events = self.event_frame(),
            trace = EosTraceSchema.validate(pd.DataFrame(self.trace, columns = TRACE_COLUMNS)),
            pairs_per_s = seq.n_pairs / elapsed if elapsed > 0 and seq.n_pairs else 0.0,
            latency_ms = latency_percentiles(step_ms),
            step_ms = step_ms
        )

    def event_frame(self) -> pd.DataFrame:

        return EventLogSchema.validate(pd.DataFrame([e.row() for e in self.events], columns = EVENT_COLUMNS))

    ########################
    ### HELPER FUNCTIONS ###
    ########################

    def _answer(self, query: QueryRequest, eos_prob: float, pair_index: int) -> Tuple[ResponseEvent, int]:

        return self._respond("query", None, eos_prob, [QUERY_START, *query.tokens, QUERY_END], pair_index)

    def _respond(
        self,
        trigger: str,
        first_probs: Tensor | None,
        eos_prob: float,
        prefix: List[str],
        pair_index: int
    ) -> Tuple[ResponseEvent, int]:

        cache = self.lm_cache if self.config.commit_responses else self.lm_cache.clone()
        start = cache.position

        probs = first_probs
        if prefix:
            probs = lm_step(self.lm, cache, self.lm.embed_tokens(self.vocab.encode(prefix)))[-1]
        self.first_decode_probs.append(probs.detach().clone())

        ids, clipped = greedy_decode(self.lm, cache, probs, self.vocab, self.config.max_response_len)
        tokens = self.vocab.decode(ids)
        if tokens and tokens[-1] == self.vocab.tokens[self.vocab.response_end_id]:
            tokens = tokens[:-1]

        category = self.vocab.category_ids.get(ids[0]) if ids else None
        event = ResponseEvent(
            stream_id = self.stream_id,
            pair_index = pair_index,
            t = self.last_timestamp,
            mode = self.config.mode,
            trigger = trigger,
            eos_prob = eos_prob,
            category = category,
            tokens = tokens[1:] if category is not None else tokens,
            clipped = clipped
        )

        appended = cache.position - start if self.config.commit_responses else 0

        return event, appended


def greedy_decode(
    lm: StreamLM,
    cache: KVCache,
    first_probs: Tensor,
    vocab: Vocab,
    max_len: int
) -> Tuple[List[int], bool]:

    '''
        Argmax decoding; every emitted token is fed back through the cache, </r> included.
        A response that hits max_len is closed with a forced </r> and flagged clipped.
    '''

    banned = torch.tensor(vocab.never_decoded, dtype = torch.long)
    end_id = vocab.response_end_id
    probs, ids = first_probs, []

    for _ in range(max_len):

        masked = probs.clone()
        masked[banned] = -1.0
        next_id = int(torch.argmax(masked))
        ids.append(next_id)
        probs = lm_step(lm, cache, lm.embed_tokens([next_id]))[-1]
        if next_id == end_id:
            return ids, False

    lm_step(lm, cache, lm.embed_tokens([end_id]))

    return ids, True


def latency_percentiles(step_ms: List[float]) -> Dict[str, float]:

    if not step_ms:
        return {"p50_ms": 0.0, "p90_ms": 0.0, "p99_ms": 0.0}

    p50, p90, p99 = np.percentile(np.asarray(step_ms), [50, 90, 99])
    return {"p50_ms": float(p50), "p90_ms": float(p90), "p99_ms": float(p99)}


#################
### EVENT LOG ###
#################

def write_event_log(path: str | Path, events: pd.DataFrame, config_hash: str) -> Path:

    path = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)
    events = EventLogSchema.validate(events)

    with open(path, "w", encoding = "utf-8") as fh:
        fh.write(json.dumps({"schema_version": EVENT_LOG_SCHEMA_VERSION, "config_hash": config_hash}) + "\n")
        for record in events.to_dict(orient = "records"):
            record["category"] = category_or_none(record["category"])
            fh.write(json.dumps(record, sort_keys = True) + "\n")

    return path


def read_event_log(path: str | Path) -> Tuple[Dict, pd.DataFrame]:

    with open(path, "r", encoding = "utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]

    if not lines:
        raise SchemaVersionError(f"{path} has no header line")

    header = json.loads(lines[0])
    if header.get("schema_version") != EVENT_LOG_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path} has event-log schema {header.get('schema_version')}, expected {EVENT_LOG_SCHEMA_VERSION}"
        )

    records = [json.loads(line) for line in lines[1:]]
    return header, EventLogSchema.validate(pd.DataFrame(records, columns = EVENT_COLUMNS))

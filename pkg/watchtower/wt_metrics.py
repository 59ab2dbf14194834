from pydantic import BaseModel, validator
from typing import Dict, List, Literal, Tuple

import logging
import math

import pandas as pd
import torch
from torch import Tensor

from watchtower.lookups import RESPONSE_END
from watchtower.wt_errors import UndefinedMetricError
from watchtower.wt_schemas import CategoryTableSchema, category_or_none
from watchtower.wt_stream_lm import InterleavedSequence, StreamLM, joint_loss_parts, lm_forward
from watchtower.wt_synth_data import AnnotationSet, EventTimeline

logger = logging.getLogger(__name__)

NO_CATEGORY = "none"


class MatchingConfig(BaseModel):

    '''
        How model responses are matched to ground truth
            - VAP window [t_p, t_n), VAD window [t_n, t_m], both from ground truth only
            - several correct responses inside one window count as one true positive
            - an unanswered round costs the distance from its expected time to the stream end
    '''

    collapse_duplicates: bool = True
    unanswered_penalty: Literal["stream_end"] = "stream_end"


class StreamTruth(BaseModel):

    stream_id: str
    timeline: EventTimeline
    annotations: AnnotationSet
    fps: float = 2.0

    @property
    def n_pairs(self) -> int:
        return self.timeline.n_frames // 2

    @property
    def stream_end(self) -> float:
        return self.timeline.n_frames / self.fps


class Round(BaseModel):

    block: int
    t: float
    event_index: int
    tokens: List[str]
    lo: float
    hi: float
    closed: bool

    def contains(self, t: float) -> bool:
        return self.lo <= t and (t <= self.hi if self.closed else t < self.hi)


class MetricReport(BaseModel):

    mode: str
    lm_ppl: float | None = None
    time_diff_seconds: float | None = None
    fluency_pct: float | None = None
    weighted_f1_pct: float | None = None
    aat_seconds: float | None = None
    counts: Dict[str, Dict[str, int]] = {}
    per_category: pd.DataFrame | None = None

    class Config:
        arbitrary_types_allowed = True

    @validator("fluency_pct", "weighted_f1_pct")
    def _percent(cls, v: float | None) -> float | None:
        if v is not None and not 0.0 <= v <= 100.0:
            raise ValueError(f"percent metric out of range: {v}")
        return v

    @validator("lm_ppl")
    def _ppl_floor(cls, v: float | None) -> float | None:
        if v is not None and v < 1.0 - 1e-9:
            raise ValueError(f"perplexity below 1: {v}")
        return v

    @validator("aat_seconds")
    def _aat_non_negative(cls, v: float | None) -> float | None:
        if v is not None and v < 0:
            raise ValueError(f"negative advance time: {v}")
        return v

    def summary(self) -> Dict:

        return self.dict(exclude = {"per_category"})


######################
### ROUND BUILDING ###
######################

def response_block(frame: int) -> int:
    return -(-frame // 2)


def expected_rounds(truth: StreamTruth, mode: str) -> List[Round]:

    '''
        One round per ground-truth response (first record wins when two share a block),
        with the task's match window split at midpoints between rounds of the same event
    '''

    fps, rounds, seen = truth.fps, [], set()
    records = sorted(truth.annotations.records(mode), key = lambda r: r.frame)
    for record in records:

        block = response_block(record.frame)
        if block in seen or block >= truth.n_pairs:
            continue
        seen.add(block)

        e = truth.timeline.events[record.event_index]
        t = 2 * block / fps
        if mode == "VAP":
            lo, hi, closed = e.t_p / fps, e.t_n / fps, False
        elif mode == "VAD":
            lo, hi, closed = e.t_n / fps, e.t_m / fps, True
        else:
            lo, hi, closed = t, truth.stream_end, True

        rounds.append(Round(
            block = block,
            t = t,
            event_index = record.event_index,
            tokens = record.response_tokens(),
            lo = lo,
            hi = hi,
            closed = closed
        ))

    ## split a shared window at the midpoints between consecutive expected times
    for before, after in zip(rounds, rounds[1:]):
        if before.event_index == after.event_index and mode != "VAA":
            middle = (before.t + after.t) / 2
            before.hi, before.closed = middle, False
            after.lo = middle

    return rounds


def _stream_events(events: pd.DataFrame, stream_id: str, mode: str) -> pd.DataFrame:

    if events.empty:
        return events

    picked = events[(events["stream_id"] == stream_id) & (events["mode"] == mode)]
    return picked.sort_values(["t", "pair_index"], kind = "mergesort")


def _category_of(value) -> str:

    return category_or_none(value) or NO_CATEGORY


###############
### METRICS ###
###############

def lm_ppl(
    model: StreamLM,
    sequences: List[InterleavedSequence],
    eos_id: int,
    visuals: List[Tensor] | None = None
) -> float:

    '''
        exp of the mean next-token NLL over response positions (l_{i+1} = 1) only
    '''

    total, count = 0.0, 0
    with torch.no_grad():
        for i, seq in enumerate(sequences):
            probs = lm_forward(model, seq, visual = None if visuals is None else visuals[i])
            parts = joint_loss_parts(probs, seq, eos_id)
            total += float(parts.text_sum)
            count += parts.n_text

    return ppl_from_sums(total, count)


def ppl_from_sums(nll_sum: float, n_positions: int) -> float:

    if n_positions == 0:
        raise UndefinedMetricError("perplexity needs at least one supervised response position")

    return math.exp(nll_sum / n_positions)


def time_diff(
    events: pd.DataFrame,
    truths: List[StreamTruth],
    mode: str,
    matching: MatchingConfig = MatchingConfig()
) -> float | None:

    gaps = []
    trigger = "query" if mode == "VAA" else "eos-gate"
    for truth in sorted(truths, key = lambda x: x.stream_id):

        stream = _stream_events(events, truth.stream_id, mode)
        times = [] if stream.empty else stream.loc[stream["trigger"] == trigger, "t"].tolist()
        used = set()
        for r in expected_rounds(truth, mode):

            match = next((i for i, t in enumerate(times) if i not in used and r.contains(t)), None)
            if match is None:
                gaps.append(abs(truth.stream_end - r.t))
                continue
            if mode == "VAA":
                used.add(match)
            gaps.append(abs(times[match] - r.t))

    return sum(gaps) / len(gaps) if gaps else None


def fluency(
    events: pd.DataFrame,
    truths: List[StreamTruth],
    mode: str,
    traces: pd.DataFrame | None = None
) -> float:

    '''
        Per round: silent frame ends scored on the gate decision, response positions scored
        on the longest prefix that matches the ground-truth tokens. Rounds end at each expected
        response; the span after the last one is a silent round of its own.
    '''

    scores = []
    for truth in sorted(truths, key = lambda x: x.stream_id):

        if traces is not None:
            covered = int((traces["stream_id"] == truth.stream_id).sum())
            if covered != truth.n_pairs:
                raise ValueError(f"trace for {truth.stream_id} covers {covered} of {truth.n_pairs} pairs")

        stream = _stream_events(events, truth.stream_id, mode)
        emitted: Dict[int, List[str]] = {}
        for row in ([] if stream.empty else stream.to_dict(orient = "records")):
            if int(row["pair_index"]) in emitted:
                continue
            head = [] if _category_of(row["category"]) == NO_CATEGORY else [f"<{row['category']}>"]
            tail = [] if row["clipped"] else [RESPONSE_END]
            emitted[int(row["pair_index"])] = head + str(row["text"]).split() + tail

        start = 0
        for r in expected_rounds(truth, mode):
            silent = [b for b in range(start, r.block) if b not in emitted]
            prefix = _common_prefix(emitted.get(r.block, []), r.tokens)
            scores.append(100.0 * (len(silent) + prefix) / (r.block - start + len(r.tokens)))
            start = r.block + 1

        if start < truth.n_pairs:
            silent = [b for b in range(start, truth.n_pairs) if b not in emitted]
            scores.append(100.0 * len(silent) / (truth.n_pairs - start))

    return sum(scores) / len(scores) if scores else 100.0


def _common_prefix(a: List[str], b: List[str]) -> int:

    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1

    return n


def weighted_f1(
    events: pd.DataFrame,
    truths: List[StreamTruth],
    mode: str,
    matching: MatchingConfig = MatchingConfig()
) -> Tuple[float, pd.DataFrame]:

    support: Dict[str, int] = {}
    tp: Dict[str, int] = {}
    fp: Dict[str, int] = {}

    for truth in sorted(truths, key = lambda x: x.stream_id):

        windows = []
        for e in truth.timeline.events:
            if mode == "VAP" and not e.predictable:
                continue
            support[e.category] = support.get(e.category, 0) + 1
            if mode == "VAP":
                windows.append((e, e.t_p / truth.fps, e.t_n / truth.fps, False))
            else:
                windows.append((e, e.t_n / truth.fps, e.t_m / truth.fps, True))

        hit = set()
        stream = _stream_events(events, truth.stream_id, mode)
        for row in ([] if stream.empty else stream.to_dict(orient = "records")):

            category, t = _category_of(row["category"]), float(row["t"])
            window = next(
                (w for w in windows if w[1] <= t and (t <= w[2] if w[3] else t < w[2])),
                None
            )
            if window is None or window[0].category != category:
                fp[category] = fp.get(category, 0) + 1
                continue

            key = id(window[0])
            if key in hit and matching.collapse_duplicates:
                continue
            if key in hit:
                fp[category] = fp.get(category, 0) + 1
                continue
            hit.add(key)
            tp[category] = tp.get(category, 0) + 1

    rows = []
    for category in sorted(set(support) | set(fp) | set(tp)):
        s, t_, f_ = support.get(category, 0), tp.get(category, 0), fp.get(category, 0)
        fn = s - t_
        denominator = 2 * t_ + f_ + fn
        rows.append({
            "category": category,
            "support": s,
            "tp": t_,
            "fp": f_,
            "fn": fn,
            "f1": 100.0 * 2 * t_ / denominator if denominator else 100.0
        })

    table = CategoryTableSchema.validate(
        pd.DataFrame(rows, columns = ["category", "support", "tp", "fp", "fn", "f1"])
    )

    total_support = sum(support.values())
    if total_support == 0:
        return (100.0 if sum(fp.values()) == 0 else 0.0), table

    score = sum(r["f1"] * r["support"] for r in rows) / total_support

    return score, table


def aat(events: pd.DataFrame, truths: List[StreamTruth]) -> float | None:

    '''
        Mean lead (t_n - t_response) over the earliest correct prediction of each event,
        None when no prediction lands strictly before an onset
    '''

    leads = []
    for truth in sorted(truths, key = lambda x: x.stream_id):

        stream = _stream_events(events, truth.stream_id, "VAP")
        rows = [] if stream.empty else stream.to_dict(orient = "records")
        for e in truth.timeline.events:
            if not e.predictable:
                continue
            lo, onset = e.t_p / truth.fps, e.t_n / truth.fps
            first = next(
                (float(r["t"]) for r in rows if _category_of(r["category"]) == e.category and lo <= float(r["t"]) < onset),
                None
            )
            if first is not None:
                leads.append(onset - first)

    return sum(leads) / len(leads) if leads else None


#################
### EVALUATOR ###
#################

class WT_Evaluator(BaseModel):

    matching: MatchingConfig = MatchingConfig()
    verbose: bool = True

    def evaluate(
        self,
        events: pd.DataFrame,
        truths: List[StreamTruth],
        mode: str,
        traces: pd.DataFrame | None = None,
        ppl: float | None = None
    ) -> MetricReport:

        f1, table = (None, None) if mode == "VAA" else weighted_f1(events, truths, mode, self.matching)
        counts = {} if table is None else {
            r["category"]: {"support": int(r["support"]), "tp": int(r["tp"]), "fp": int(r["fp"]), "fn": int(r["fn"])}
            for r in table.to_dict(orient = "records")
        }

        report = MetricReport(
            mode = mode,
            lm_ppl = ppl,
            time_diff_seconds = time_diff(events, truths, mode, self.matching),
            fluency_pct = fluency(events, truths, mode, traces),
            weighted_f1_pct = f1,
            aat_seconds = aat(events, truths) if mode == "VAP" else None,
            counts = counts,
            per_category = table
        )

        if self.verbose:
            logger.info(
                f"{mode}: f1={report.weighted_f1_pct} timediff={report.time_diff_seconds} "
                f"fluency={report.fluency_pct} aat={report.aat_seconds} ppl={report.lm_ppl}"
            )

        return report

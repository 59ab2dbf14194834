import json
import math

import pandas as pd
import pytest
import torch
from pydantic import ValidationError

from watchtower.lookups import STREAM_EOS
from watchtower.wt_core_math import DTYPE
from watchtower.wt_errors import UndefinedMetricError
from watchtower.wt_metrics import (
    MatchingConfig,
    MetricReport,
    StreamTruth,
    WT_Evaluator,
    aat,
    expected_rounds,
    fluency,
    lm_ppl,
    ppl_from_sums,
    time_diff,
    weighted_f1
)
from watchtower.wt_schemas import EVENT_COLUMNS, EventLogSchema
from watchtower.wt_scheduler import read_event_log
from watchtower.wt_stream_lm import InterleavedSequence, build_interleaved, joint_loss, joint_loss_parts, lm_forward
from watchtower.wt_synth_data import AnnotationSet, Event, EventTimeline, QueryRecord, ResponseRecord, WT_Dataset
from watchtower.wt_vision_encoder import encode_sequence

STREAM = "g00001"


def _truth(n_frames: int, events: list, mode: str = "VAD", frames: list | None = None) -> StreamTruth:

    timeline = EventTimeline(n_frames = n_frames, events = [Event(category = c, t_p = p, t_n = n, t_m = m) for c, p, n, m in events])
    frames = frames if frames is not None else [e.t_n if mode == "VAD" else e.t_p for e in timeline.events]
    owners = [next(i for i, e in enumerate(timeline.events) if e.t_p <= f <= e.t_m) for f in frames]
    records = [
        ResponseRecord(task = mode, frame = f, category = timeline.events[i].category, description = ["alert"], event_index = i)
        for f, i in zip(frames, owners)
    ]
    annotations = AnnotationSet(**{mode.lower(): records})

    return StreamTruth(stream_id = STREAM, timeline = timeline, annotations = annotations)


def _log(*rows, mode: str = "VAD", trigger: str = "eos-gate") -> pd.DataFrame:

    records = [
        {
            "stream_id": STREAM,
            "pair_index": pair,
            "t": float(pair),
            "mode": mode,
            "trigger": trigger,
            "eos_prob": 0.1,
            "category": category,
            "text": text,
            "clipped": False
        }
        for pair, category, text in rows
    ]

    return EventLogSchema.validate(pd.DataFrame(records, columns = EVENT_COLUMNS))


@pytest.fixture
def golden_truth() -> StreamTruth:
    return _truth(40, [("fighting", 4, 4, 8), ("fighting", 16, 16, 20), ("arson", 28, 28, 32)])


@pytest.fixture
def golden_log() -> pd.DataFrame:
    return _log((3, "fighting", "alert"), (15, "arson", "alert"), (18, "arson", "alert"))


class TestRounds:

    def test_windows_follow_the_task(self):

        vap = expected_rounds(_truth(120, [("fighting", 36, 60, 70)], "VAP"), "VAP")[0]
        vad = expected_rounds(_truth(120, [("fighting", 36, 60, 70)], "VAD"), "VAD")[0]

        assert (vap.lo, vap.hi, vap.closed) == (18.0, 30.0, False)
        assert (vad.lo, vad.hi, vad.closed) == (30.0, 35.0, True)
        assert vap.contains(18.0) and not vap.contains(30.0)
        assert vad.contains(35.0)

    def test_same_event_rounds_split_at_the_midpoint(self):

        truth = _truth(40, [("fighting", 10, 10, 16)], frames = [10, 13, 16])
        rounds = expected_rounds(truth, "VAD")

        assert [r.block for r in rounds] == [5, 7, 8]
        assert (rounds[0].hi, rounds[1].lo, rounds[1].hi, rounds[2].lo) == (6.0, 6.0, 7.5, 7.5)
        assert rounds[2].hi == 8.0 and rounds[2].closed

    def test_records_sharing_a_block_keep_the_first(self):
        truth = _truth(40, [("fighting", 10, 10, 16)], frames = [13, 14])
        assert [r.block for r in expected_rounds(truth, "VAD")] == [7]


class TestTimeDiff:

    def test_earliest_response_inside_each_window(self):
        truth = _truth(40, [("fighting", 8, 8, 12), ("fighting", 20, 20, 24)])
        assert time_diff(_log((5, "fighting", "alert"), (12, "fighting", "alert")), [truth], "VAD") == pytest.approx(1.5)

    def test_unanswered_round_costs_distance_to_stream_end(self):
        truth = _truth(40, [("fighting", 8, 8, 12)])
        assert time_diff(_log(), [truth], "VAD") == pytest.approx(16.0)

    def test_golden_stream(self, golden_truth, golden_log):
        assert time_diff(golden_log, [golden_truth], "VAD") == pytest.approx(14 / 3)

    def test_no_rounds(self):
        assert time_diff(_log(), [_truth(20, [])], "VAD") is None

    def test_queries_are_matched_once_each(self):

        timeline = EventTimeline(n_frames = 40, events = [Event(category = "fighting", t_p = 8, t_n = 8, t_m = 12)])
        query = QueryRecord(frame = 10, family = "what", query = ["what", "happening"], answer = ["<fighting>", "is"], category = "fighting", event_index = 0)
        truth = StreamTruth(stream_id = STREAM, timeline = timeline, annotations = AnnotationSet(vaa = [query]))

        answered = pd.concat([_log((6, "fighting", "is"), mode = "VAA", trigger = "query"), _log((5, "fighting", "is"), mode = "VAA")], ignore_index = True)
        assert time_diff(answered, [truth], "VAA") == pytest.approx(1.0)


class TestFluency:

    def test_silent_stream_scores_the_gate_only(self):
        truth = _truth(16, [("fighting", 12, 12, 14)], frames = [14])
        assert fluency(_log(), [truth], "VAD") == pytest.approx(70.0)

    def test_golden_stream(self, golden_truth, golden_log):
        assert fluency(golden_log, [golden_truth], "VAD") == pytest.approx(53.125)

    def test_exact_answer_scores_full_marks(self):
        truth = _truth(8, [("fighting", 2, 2, 4)], frames = [2])
        assert fluency(_log((1, "fighting", "alert")), [truth], "VAD") == pytest.approx(100.0)

    def test_trace_must_cover_the_stream(self, golden_truth, golden_log):
        trace = pd.DataFrame({"stream_id": [STREAM] * 3, "pair_index": [0, 1, 2], "t": [0.0, 1.0, 2.0], "eos_prob": [0.9] * 3})
        with pytest.raises(ValueError):
            fluency(golden_log, [golden_truth], "VAD", trace)


class TestWeightedF1:

    def test_golden_stream(self, golden_truth, golden_log):

        score, table = weighted_f1(golden_log, [golden_truth], "VAD")
        rows = table.set_index("category")

        assert score == pytest.approx(200 / 3)
        assert rows.loc["fighting", ["tp", "fp", "fn"]].tolist() == [1, 0, 1]
        assert rows.loc["arson", ["tp", "fp", "fn"]].tolist() == [1, 1, 0]

    def test_duplicates_inside_a_window(self):

        truth = _truth(40, [("fighting", 8, 8, 12)])
        log = _log((4, "fighting", "alert"), (5, "fighting", "alert"))

        assert weighted_f1(log, [truth], "VAD")[0] == pytest.approx(100.0)
        score, table = weighted_f1(log, [truth], "VAD", MatchingConfig(collapse_duplicates = False))
        assert table.loc[0, "fp"] == 1 and score == pytest.approx(200 / 3)

    def test_wrong_category_is_a_false_positive(self):
        truth = _truth(40, [("fighting", 8, 8, 12)])
        score, table = weighted_f1(_log((4, "arson", "alert")), [truth], "VAD")
        assert score == 0.0
        assert set(table["category"]) == {"arson", "fighting"}

    def test_unpredictable_events_leave_vap_without_support(self):

        truth = _truth(40, [("fighting", 8, 8, 12)], "VAP", frames = [])
        assert weighted_f1(_log(mode = "VAP"), [truth], "VAP")[0] == 100.0
        assert weighted_f1(_log((3, "fighting", "warning"), mode = "VAP"), [truth], "VAP")[0] == 0.0

    def test_missing_category_counts_under_none(self):
        truth = _truth(40, [("fighting", 8, 8, 12)])
        _, table = weighted_f1(_log((4, None, "alert")), [truth], "VAD")
        assert "none" in set(table["category"])


class TestAAT:

    def test_mean_lead_over_correct_predictions(self):
        truth = _truth(120, [("fighting", 36, 60, 70), ("arson", 80, 100, 110)], "VAP")
        log = _log((20, "fighting", "warning"), (45, "arson", "warning"), mode = "VAP")
        assert aat(log, [truth]) == pytest.approx(7.5)

    def test_prediction_at_the_onset_does_not_count(self):
        truth = _truth(120, [("fighting", 36, 60, 70)], "VAP")
        assert aat(_log((30, "fighting", "warning"), mode = "VAP"), [truth]) is None

    def test_earliest_prediction_at_the_precursor_start(self):
        truth = _truth(120, [("fighting", 36, 60, 70)], "VAP")
        log = _log((18, "fighting", "warning"), (25, "fighting", "warning"), mode = "VAP")
        assert aat(log, [truth]) == pytest.approx(12.0)


class TestPerplexity:

    def test_hand_computed_value(self, vocab):

        seq = InterleavedSequence(
            token_ids = [-1, vocab.id("<fighting>"), vocab.id("alert")],
            visual_rows = [0, -1, -1],
            block_index = [0, -1, -1],
            block_last = [True, False, False],
            l = [0, 1, 1],
            f = [0, 0, 0],
            visual = torch.zeros(1, 16, dtype = DTYPE)
        )
        probs = torch.full((3, vocab.size), 1.0 / vocab.size, dtype = DTYPE)
        probs[0, vocab.id("<fighting>")] = 0.5
        probs[1, vocab.id("alert")] = 0.25

        parts = joint_loss_parts(probs, seq, vocab.id(STREAM_EOS))
        assert ppl_from_sums(float(parts.text_sum), parts.n_text) == pytest.approx(math.sqrt(8.0), abs = 1e-12)

    def test_matches_text_only_joint_loss(self, encoder, frames, lm, vocab):

        records = [ResponseRecord(task = "VAD", frame = 4, category = "fighting", description = ["alert", "people", "fighting"])]
        seq = build_interleaved(AnnotationSet(vad = records), encode_sequence(encoder, frames), vocab, "VAD")
        with torch.no_grad():
            expected = math.exp(float(joint_loss(lm_forward(lm, seq), seq, 0.0, vocab.eos_id)))

        assert lm_ppl(lm, [seq], vocab.eos_id) == pytest.approx(expected, abs = 1e-9)

    def test_undefined_without_response_positions(self):
        with pytest.raises(UndefinedMetricError):
            ppl_from_sums(0.0, 0)


class TestEvaluator:

    def test_golden_report(self, golden_truth, golden_log):

        report = WT_Evaluator(verbose = False).evaluate(golden_log, [golden_truth], "VAD")

        assert report.weighted_f1_pct == pytest.approx(200 / 3)
        assert report.time_diff_seconds == pytest.approx(14 / 3)
        assert report.fluency_pct == pytest.approx(53.125)
        assert report.aat_seconds is None and report.lm_ppl is None
        assert report.counts["arson"] == {"support": 1, "tp": 1, "fp": 1, "fn": 0}
        assert "per_category" not in report.summary()

    @pytest.mark.parametrize("task", ["vad", "vap", "vaa"])
    def test_golden_fixture_files(self, fixtures_dir, task):

        folder = fixtures_dir / f"golden_{task}"
        _, events = read_event_log(folder / "events.jsonl")
        dataset = WT_Dataset.load(folder / "dataset.jsonl")
        truths = [StreamTruth(stream_id = s.stream_id, timeline = s.timeline, annotations = s.annotations) for s in dataset.test]
        expected = json.loads((folder / "expected_report.json").read_text())

        summary = WT_Evaluator(verbose = False).evaluate(events, truths, expected["mode"]).summary()
        for key in ("weighted_f1_pct", "time_diff_seconds", "fluency_pct", "aat_seconds", "lm_ppl"):
            if expected[key] is None:
                assert summary[key] is None, key
            else:
                assert summary[key] == pytest.approx(expected[key]), key
        assert summary["counts"] == expected["counts"]

    def test_vaa_has_no_f1_or_aat(self, golden_truth):
        report = WT_Evaluator(verbose = False).evaluate(_log(mode = "VAA"), [golden_truth], "VAA")
        assert report.weighted_f1_pct is None and report.aat_seconds is None

    def test_repeatable(self, golden_truth, golden_log):
        evaluator = WT_Evaluator(verbose = False)
        first = evaluator.evaluate(golden_log, [golden_truth], "VAD").summary()
        assert evaluator.evaluate(golden_log, [golden_truth], "VAD").summary() == first

    @pytest.mark.parametrize("field, value", [("fluency_pct", 100.5), ("weighted_f1_pct", -1.0), ("lm_ppl", 0.5), ("aat_seconds", -0.1)])
    def test_report_rejects_impossible_values(self, field, value):
        with pytest.raises(ValidationError):
            MetricReport(mode = "VAD", **{field: value})

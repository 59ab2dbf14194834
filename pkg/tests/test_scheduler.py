import json

import pytest
import torch
from pydantic import ValidationError

from watchtower.lookups import BOS, QUERY_END, QUERY_START, STREAM_EOS
from watchtower.wt_errors import ConfigurationError, SchemaVersionError, VocabularyError
from watchtower.wt_scheduler import (
    QueryRequest,
    SessionConfig,
    WT_Session,
    latency_percentiles,
    read_event_log,
    write_event_log
)
from watchtower.wt_vision_encoder import FrameSequence


@pytest.fixture
def session_factory(encoder, strd, lm, vocab):

    def _session(**overrides) -> WT_Session:
        return WT_Session(encoder, strd, lm, vocab, SessionConfig(**overrides), stream_id = "s0")

    return _session


class TestSessionConfig:

    def test_mode_defaults(self):
        assert SessionConfig(mode = "VAP").gamma == 0.96
        assert SessionConfig(mode = "VAD").gamma == 0.7
        assert SessionConfig(mode = "VAA").gamma == 1.0

    @pytest.mark.parametrize("gamma", [0.0, -0.2, 1.5])
    def test_gamma_outside_range(self, gamma):
        with pytest.raises(ValidationError):
            SessionConfig(gamma = gamma)

    def test_cache_must_hold_a_frame_pair(self, encoder, strd, lm, vocab):
        with pytest.raises(ConfigurationError):
            WT_Session(encoder, strd, lm, vocab, SessionConfig(lm_cache_len = 2))
        with pytest.raises(ConfigurationError):
            WT_Session(encoder, strd, lm, vocab, SessionConfig(strd_cache_len = 3))


class TestEosGate:

    def test_gamma_one_answers_every_pair(self, session_factory, frames):

        run = session_factory(mode = "VAD", gamma = 1.0).run_stream(frames)

        assert len(run.events) == frames.n_pairs
        assert set(run.events["trigger"]) == {"eos-gate"}
        assert run.events["pair_index"].tolist() == list(range(frames.n_pairs))
        assert len(run.trace) == frames.n_pairs
        assert len(run.step_ms) == frames.n_pairs

    @pytest.mark.parametrize("mode", ["VAP", "VAD"])
    def test_responding_pairs_grow_with_gamma_on_every_stream(self, session_factory, encoder, lm, vocab, rng, mode):

        ## lifts P[EOS] to around one half so the grid splits the pairs
        with torch.no_grad():
            lm.head.bias[vocab.eos_id] += 4.0

        c, grid = encoder.config, [round(0.1 * k, 1) for k in range(1, 11)]
        for i in range(3):
            frames = FrameSequence(frames = rng.spawn(f"stream-{i}").normal((12, c.height, c.width, c.channels)), fps = c.fps)
            answered = [
                set(session_factory(mode = mode, gamma = g, commit_responses = False).run_stream(frames).events["pair_index"])
                for g in grid
            ]
            assert all(low <= high for low, high in zip(answered, answered[1:]))
            assert answered[-1] == set(range(frames.n_pairs))

    def test_uncommitted_responses_leave_the_trace_alone(self, session_factory, frames):

        runs = {g: session_factory(mode = "VAD", gamma = g, commit_responses = False).run_stream(frames) for g in (0.3, 0.6, 1.0)}

        traces = [runs[g].trace["eos_prob"].tolist() for g in (0.3, 0.6, 1.0)]
        assert traces[0] == traces[1] == traces[2]
        counts = [len(runs[g].events) for g in (0.3, 0.6, 1.0)]
        assert counts == sorted(counts)
        assert counts[-1] == frames.n_pairs

    def test_control_tokens_never_decoded(self, session_factory, frames):
        run = session_factory(mode = "VAD", gamma = 1.0).run_stream(frames)
        words = " ".join(run.events["text"]).split()
        assert not {BOS, QUERY_START, QUERY_END, STREAM_EOS} & set(words)

    def test_length_cap_clips_responses(self, session_factory, frames):
        session = session_factory(mode = "VAD", gamma = 1.0, max_response_len = 1)
        session.run_stream(frames)
        for event in session.events:
            assert event.clipped or (not event.tokens and event.category is None)
            assert len(event.tokens) <= 1

    def test_baseline_session_runs_without_a_distiller(self, encoder, lm, vocab, frames):
        session = WT_Session(encoder, None, lm, vocab, SessionConfig(mode = "VAD", gamma = 1.0))
        session.run_stream(frames)
        assert session.strd_cache is None
        assert len(session.events) == frames.n_pairs


class TestQueries:

    def test_queries_need_a_vaa_session(self, session_factory):
        with pytest.raises(ConfigurationError):
            session_factory(mode = "VAD").submit_query(["what", "happening"], 0.0)

    def test_unknown_query_word(self, session_factory):
        with pytest.raises(VocabularyError):
            session_factory(mode = "VAA").submit_query(["zebra"], 0.0)

    def test_early_query_waits_for_its_frame(self, session_factory, frames):

        session = session_factory(mode = "VAA")
        assert session.submit_query(["what", "happening"], 2.0) is None

        answered = [session.step_frame(*frames.pair(i)) for i in range(3)]
        assert answered[0] is None and answered[1] is None
        assert answered[2].trigger == "query"
        assert answered[2].pair_index == 2 and answered[2].t == pytest.approx(2.0)

    def test_late_query_answers_at_once(self, session_factory, frames):

        session = session_factory(mode = "VAA")
        for i in range(3):
            session.step_frame(*frames.pair(i))

        event = session.submit_query(["who", "involved"], 1.0)
        assert event is not None and event.t == pytest.approx(2.0)
        assert event.pair_index == 2
        assert session.events == [event]

    def test_late_query_matches_the_block_timestamp(self, session_factory, frames):

        session = session_factory(mode = "VAA")
        for i in range(4):
            session.step_frame(*frames.pair(i))

        event = session.submit_query(["what", "happening"], 0.5)
        assert event.t == pytest.approx(3.0)
        assert event.pair_index == session.trace[-1]["pair_index"] == 3

    def test_vaa_never_answers_unasked(self, session_factory, frames):
        run = session_factory(mode = "VAA").run_stream(frames)
        assert run.events.empty

    def test_scheduled_queries_in_run_stream(self, session_factory, frames):
        schedule = [QueryRequest(tokens = ["where", "happening"], t = 3.0), QueryRequest(tokens = ["what", "happening"], t = 1.0)]
        run = session_factory(mode = "VAA").run_stream(frames, schedule)
        assert run.events["pair_index"].tolist() == [1, 3]
        assert set(run.events["trigger"]) == {"query"}


class TestEventLog:

    def test_write_then_read(self, session_factory, frames, tmp_path):

        run = session_factory(mode = "VAD", gamma = 1.0).run_stream(frames)
        path = write_event_log(tmp_path / "events.jsonl", run.events, "abc123")
        header, events = read_event_log(path)

        assert header == {"schema_version": 1, "config_hash": "abc123"}
        assert events["text"].tolist() == run.events["text"].tolist()
        assert events["pair_index"].tolist() == run.events["pair_index"].tolist()

    def test_unknown_schema_version(self, tmp_path):
        path = tmp_path / "events.jsonl"
        path.write_text(json.dumps({"schema_version": 99, "config_hash": "x"}) + "\n")
        with pytest.raises(SchemaVersionError):
            read_event_log(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "events.jsonl"
        path.write_text("")
        with pytest.raises(SchemaVersionError):
            read_event_log(path)


class TestLatency:

    def test_no_steps(self):
        assert latency_percentiles([]) == {"p50_ms": 0.0, "p90_ms": 0.0, "p99_ms": 0.0}

    def test_percentiles(self):
        out = latency_percentiles([float(i) for i in range(1, 101)])
        assert out["p50_ms"] == pytest.approx(50.5)
        assert out["p50_ms"] <= out["p90_ms"] <= out["p99_ms"]

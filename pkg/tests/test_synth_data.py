import json

import pytest
import torch
from pydantic import ValidationError

from watchtower.wt_core_math import SeededRng
from watchtower.wt_errors import GenerationError, SchemaVersionError
from watchtower.wt_synth_data import (
    DataConfig,
    Event,
    EventTimeline,
    WT_Dataset,
    caption_records,
    frame_labels,
    gen_annotations,
    gen_timeline,
    generate_dataset,
    make_signatures,
    probe_separability,
    render_frames,
    vad_key_frames
)


class TestTimeline:

    @pytest.mark.parametrize("seed", range(10))
    def test_events_respect_ordering(self, seed):

        config = DataConfig(n_frames = 48, event_count = (1, 2))
        timeline = gen_timeline(SeededRng(seed = seed), config)

        previous_end = -2
        for e in timeline.events:
            assert e.t_p <= e.t_n < e.t_m <= config.n_frames - 2
            assert e.t_p % 2 == 0 and e.t_n % 2 == 0 and e.t_m % 2 == 0
            assert e.t_p >= previous_end + 2
            assert e.category in config.categories
            previous_end = e.t_m

    def test_ten_thousand_timelines_keep_their_invariants(self):

        config = DataConfig(n_frames = 48, event_count = (0, 2))
        rng = SeededRng(seed = 2024)
        counts = set()

        for _ in range(10_000):
            timeline = gen_timeline(rng, config)
            counts.add(len(timeline.events))
            previous_end = -2
            for e in timeline.events:
                assert 0 <= e.t_p <= e.t_n < e.t_m <= config.n_frames - 2
                assert e.t_p % 2 == 0 and e.t_n % 2 == 0 and e.t_m % 2 == 0
                assert e.t_p >= previous_end + 2
                assert (e.t_n - e.t_p) // 2 <= config.precursor_pairs[1]
                assert config.anomaly_pairs[0] <= (e.t_m - e.t_n) // 2 <= config.anomaly_pairs[1]
                previous_end = e.t_m

        assert counts == {0, 1, 2}

    def test_overlap_rejected(self):
        with pytest.raises(ValidationError):
            EventTimeline(n_frames = 40, events = [
                Event(category = "arson", t_p = 2, t_n = 4, t_m = 10),
                Event(category = "arson", t_p = 8, t_n = 12, t_m = 14)
            ])

    def test_event_ending_on_the_last_frame_rejected(self):
        with pytest.raises(ValidationError, match = "last whole frame pair"):
            EventTimeline(n_frames = 12, events = [Event(category = "arson", t_p = 4, t_n = 6, t_m = 12)])

    def test_event_ending_on_the_last_pair_accepted(self):
        timeline = EventTimeline(n_frames = 12, events = [Event(category = "arson", t_p = 4, t_n = 6, t_m = 10)])
        assert [r.frame for r in gen_annotations(timeline).vad] == [6, 8, 10]

    def test_too_many_events_for_the_stream(self):
        config = DataConfig(n_frames = 8, event_count = (3, 3), anomaly_pairs = (3, 3), max_retries = 5)
        with pytest.raises(GenerationError):
            gen_timeline(SeededRng(seed = 0), config)

    def test_odd_frame_count_rejected(self):
        with pytest.raises(ValidationError):
            DataConfig(n_frames = 15)

    def test_unpredictable_event_has_no_precursor(self):
        config = DataConfig(n_frames = 32, event_count = (1, 1), unpredictable_fraction = 1.0)
        e = gen_timeline(SeededRng(seed = 1), config).events[0]
        assert e.t_p == e.t_n and not e.predictable

    def test_frame_labels(self):
        timeline = EventTimeline(n_frames = 12, events = [Event(category = "arson", t_p = 2, t_n = 4, t_m = 6)])
        assert frame_labels(timeline) == ["normal"] * 2 + ["precursor"] * 2 + ["anomaly"] * 3 + ["normal"] * 5


class TestAnnotations:

    def test_vad_key_frames(self):
        assert vad_key_frames(10, 16) == [10, 13, 16]
        assert vad_key_frames(4, 4) == [4]

    def test_records_follow_the_events(self, vocab):

        timeline = EventTimeline(n_frames = 40, events = [
            Event(category = "fighting", t_p = 4, t_n = 8, t_m = 14),
            Event(category = "stealing", t_p = 20, t_n = 20, t_m = 24)
        ])
        annotations = gen_annotations(timeline, vocab)

        assert [(r.frame, r.category) for r in annotations.vap] == [(4, "fighting")]
        assert [r.frame for r in annotations.vad] == [8, 11, 14, 20, 22, 24]
        assert annotations.vad[0].response_tokens() == ["<fighting>", "alert", "people", "fighting", "</r>"]
        assert [q.frame for q in annotations.vaa] == [11, 22]
        assert all(q.answer[0] == f"<{q.category}>" for q in annotations.vaa)

    def test_captions_cover_the_stream(self):
        timeline = EventTimeline(n_frames = 12, events = [Event(category = "arson", t_p = 2, t_n = 4, t_m = 6)])
        records = caption_records(timeline, every = 1)
        assert [r.frame for r in records] == [0, 2, 4, 6, 8, 10]
        assert [r.category for r in records] == [None, "arson", "arson", "arson", None, None]
        assert records[1].description[0] == "warning" and records[2].description[0] == "alert"


class TestRendering:

    def test_noiseless_frames_are_exact(self):

        config = DataConfig(n_frames = 12, height = 8, width = 8, channels = 2)
        signatures = make_signatures(SeededRng(seed = 2), config)
        timeline = EventTimeline(n_frames = 12, events = [Event(category = "fighting", t_p = 2, t_n = 4, t_m = 6)])
        frames = render_frames(timeline, signatures, 0.0, SeededRng(seed = 3)).frames

        pattern = signatures.patterns["fighting"]
        assert torch.equal(frames[0], signatures.background)
        assert torch.allclose(frames[3], signatures.background + config.rho * pattern)
        assert torch.allclose(frames[6], signatures.background + pattern)
        assert torch.equal(frames[7], signatures.background)

    def test_signatures_are_separable(self):

        config = DataConfig(n_frames = 24, n_categories = 2, height = 8, width = 8, channels = 2, event_count = (1, 1))
        rng = SeededRng(seed = 5)
        signatures = make_signatures(rng.spawn("signatures"), config)

        streams, labels = [], []
        for i in range(40):
            timeline = gen_timeline(rng.spawn(f"timeline-{i}"), config)
            streams.append(render_frames(timeline, signatures, config.noise_sd, rng.spawn(f"render-{i}")).frames)
            labels.append(frame_labels(timeline))

        assert probe_separability(streams, labels) >= 0.99


class TestDataset:

    def test_same_seed_same_bytes(self, small_data_config, tmp_path):
        a = generate_dataset(small_data_config, seed = 11).serialize(tmp_path / "a.jsonl")
        b = generate_dataset(small_data_config, seed = 11).serialize(tmp_path / "b.jsonl")
        assert a.read_bytes() == b.read_bytes()

    def test_split_sizes(self, small_data_config):
        dataset = generate_dataset(small_data_config, seed = 1)
        manifest = dataset.split_manifest()
        assert len(manifest["train"]) == 4 and len(manifest["test"]) == 2
        assert not set(manifest["train"]) & set(manifest["test"])

    def test_load_restores_streams(self, small_data_config, tmp_path):

        dataset = generate_dataset(small_data_config, seed = 4, config_hash = "h1")
        loaded = WT_Dataset.load(dataset.serialize(tmp_path / "dataset.jsonl"))

        assert loaded.config_hash == "h1"
        assert [s.stream_id for s in loaded.streams] == [s.stream_id for s in dataset.streams]
        stream = dataset.test[0]
        assert torch.equal(loaded.render(loaded.stream(stream.stream_id)).frames, dataset.render(stream).frames)

    def test_unknown_schema_version(self, tmp_path):
        path = tmp_path / "dataset.jsonl"
        path.write_text(json.dumps({"schema_version": 7, "seed": 0, "config": {}, "config_hash": "x"}) + "\n")
        with pytest.raises(SchemaVersionError):
            WT_Dataset.load(path)

    def test_missing_stream(self, small_data_config):
        with pytest.raises(KeyError):
            generate_dataset(small_data_config, seed = 0).stream("nope")

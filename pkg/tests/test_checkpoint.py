import pytest
import torch

from watchtower.wt_checkpoint import CHECKPOINT_FORMAT_VERSION, load_checkpoint, save_checkpoint, stable_hash
from watchtower.wt_core_math import DTYPE
from watchtower.wt_errors import CheckpointError, ConfigHashError, SchemaVersionError


@pytest.fixture
def state():
    return {"out.weight": torch.arange(6, dtype = DTYPE).reshape(2, 3), "out.bias": torch.zeros(3, dtype = DTYPE)}


class TestStableHash:

    def test_key_order_does_not_matter(self):
        assert stable_hash({"a": 1, "b": [1, 2]}) == stable_hash({"b": [1, 2], "a": 1})

    def test_values_matter(self):
        assert stable_hash({"a": 1}) != stable_hash({"a": 2})


class TestCheckpoint:

    def test_save_then_load(self, state, tmp_path):

        path = save_checkpoint(tmp_path / "nested" / "strd.pt", "strd", state, "h1", {"distilled": True})
        header, loaded = load_checkpoint(path, "strd", expected_hash = "h1")

        assert header.kind == "strd" and header.meta == {"distilled": True}
        assert header.format_version == CHECKPOINT_FORMAT_VERSION
        assert all(torch.equal(loaded[k], v) for k, v in state.items())

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match = "missing"):
            load_checkpoint(tmp_path / "nope.pt", "strd")

    def test_wrong_kind(self, state, tmp_path):
        path = save_checkpoint(tmp_path / "a.pt", "adapters", state, "h1")
        with pytest.raises(CheckpointError):
            load_checkpoint(path, "strd")

    def test_config_hash_mismatch(self, state, tmp_path):
        path = save_checkpoint(tmp_path / "a.pt", "strd", state, "h1")
        with pytest.raises(ConfigHashError):
            load_checkpoint(path, "strd", expected_hash = "h2")

    def test_unknown_format_version(self, state, tmp_path):
        path = tmp_path / "old.pt"
        torch.save({"header": {"format_version": 0, "kind": "strd", "config_hash": "h1", "meta": {}}, "state": state}, path)
        with pytest.raises(SchemaVersionError):
            load_checkpoint(path, "strd")

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "junk.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError, match = "unreadable"):
            load_checkpoint(path, "strd")

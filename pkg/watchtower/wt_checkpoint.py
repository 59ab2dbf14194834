from pydantic import BaseModel
from typing import Any, Dict, Tuple

import hashlib
import json
import logging
from pathlib import Path

import torch
from torch import Tensor

from watchtower.wt_errors import CheckpointError, ConfigHashError, SchemaVersionError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def canonical_json(payload: Dict[str, Any]) -> str:

    return json.dumps(payload, sort_keys = True, separators = (",", ":"))


def stable_hash(payload: Dict[str, Any]) -> str:

    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:16]


class CheckpointHeader(BaseModel):

    format_version: int = CHECKPOINT_FORMAT_VERSION
    kind: str
    config_hash: str
    meta: Dict[str, Any] = {}


def save_checkpoint(
    path: str | Path,
    kind: str,
    state: Dict[str, Tensor],
    config_hash: str,
    meta: Dict[str, Any] | None = None
) -> Path:

    path = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)
    header = CheckpointHeader(kind = kind, config_hash = config_hash, meta = meta or {})

    torch.save(
        {"header": header.dict(), "state": {k: v.detach().clone() for k, v in state.items()}},
        path
    )
    logger.info(f"Saved {kind} checkpoint -> {path} 💾")

    return path


def load_checkpoint(
    path: str | Path,
    kind: str,
    expected_hash: str | None = None
) -> Tuple[CheckpointHeader, Dict[str, Tensor]]:

    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing {kind} checkpoint: {path}")

    try:
        payload = torch.load(path, weights_only = True)
        header = CheckpointHeader.parse_obj(payload["header"])
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}")

    if header.format_version != CHECKPOINT_FORMAT_VERSION:
        raise SchemaVersionError(
            f"checkpoint {path} has format {header.format_version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    if header.kind != kind:
        raise CheckpointError(f"checkpoint {path} holds {header.kind!r}, expected {kind!r}")
    if expected_hash is not None and header.config_hash != expected_hash:
        raise ConfigHashError(
            f"checkpoint {path} was made under config {header.config_hash}, current config is {expected_hash}"
        )

    return header, payload["state"]

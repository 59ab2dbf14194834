from pydantic import BaseModel, BaseSettings, root_validator, validator
from typing import Any, Dict, List

import json
import logging
from pathlib import Path

from watchtower.wt_checkpoint import stable_hash
from watchtower.wt_errors import ConfigurationError
from watchtower.wt_metrics import MatchingConfig
from watchtower.wt_relation_distill import DistillConfig
from watchtower.wt_scheduler import DEFAULT_GAMMA
from watchtower.wt_stream_lm import FinetuneConfig, LMConfig, LoRAConfig, PretrainConfig
from watchtower.wt_synth_data import DataConfig
from watchtower.wt_vision_encoder import EncoderConfig

logger = logging.getLogger(__name__)

## switches that change logging only, never an artifact
HASH_EXCLUDE = {
    "out": ...,
    "distill": {"verbose"},
    "pretrain": {"verbose"},
    "finetune": {"verbose"}
}


class Settings(BaseSettings):

    output_root: str | None = None

    class Config:
        env_prefix = "WATCHTOWER_"


class RunConfig(BaseModel):

    '''
        The whole experiment in one document
            - every stage reads it, every artifact carries its hash
            - `out` names the run directory and is left out of the hash
    '''

    seed: int = 0
    out: str = "runs/default"

    ## Data + model
    data: DataConfig = DataConfig()
    encoder: EncoderConfig = EncoderConfig()
    teacher_depth: int = 2
    distill: DistillConfig = DistillConfig()
    lm: LMConfig = LMConfig()

    ## Training
    pretrain: PretrainConfig = PretrainConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    lora: LoRAConfig = LoRAConfig()
    train_modes: List[str] = ["VAP", "VAD", "VAA"]

    ## Streaming
    strd_cache_len: int = 256
    lm_cache_len: int = 1024
    max_response_len: int = 12
    gamma: Dict[str, float] = dict(DEFAULT_GAMMA)

    ## Evaluation + experiments
    matching: MatchingConfig = MatchingConfig()
    held_out_streams: int = 64
    ablation_seeds: List[int] = [0, 1, 2]
    efficacy_seeds: List[int] = [0, 1, 2, 3, 4]
    gamma_grid: List[float] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    bench_pairs: int = 2000

    @validator("train_modes", each_item = True)
    def _known_mode(cls, v: str) -> str:
        if v not in ("VAP", "VAD", "VAA"):
            raise ValueError(f"unknown task mode {v!r}")
        return v

    @validator("gamma")
    def _gamma_per_mode(cls, v: Dict[str, float]) -> Dict[str, float]:
        merged = {**DEFAULT_GAMMA, **v}
        for mode, g in merged.items():
            if mode not in DEFAULT_GAMMA or not 0.0 < g <= 1.0:
                raise ValueError(f"gamma[{mode}]={g} must name a task mode and lie in (0, 1]")
        return merged

    @root_validator(skip_on_failure = True)
    def _shapes_agree(cls, values: dict) -> dict:

        data, encoder = values["data"], values["encoder"]
        frame = (data.height, data.width, data.channels)
        if frame != (encoder.height, encoder.width, encoder.channels):
            raise ValueError(f"data frames {frame} do not match encoder input {(encoder.height, encoder.width, encoder.channels)}")
        if data.fps != encoder.fps:
            raise ValueError(f"data fps {data.fps} != encoder fps {encoder.fps}")
        if values["lm"].mhsa.d_model != encoder.mhsa.d_model:
            raise ValueError("LM width must equal the visual token width")

        return values

    @property
    def config_hash(self) -> str:
        return stable_hash(json.loads(self.json(exclude = HASH_EXCLUDE)))

    def stamp(self) -> Dict[str, Any]:
        return {"config_hash": self.config_hash, "config": json.loads(self.json())}


######################
### USER FUNCTIONS ###
######################

def load_run_config(path: str | Path | None = None) -> RunConfig:

    if path is None:
        return RunConfig()

    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")

    return RunConfig.parse_file(path)


def apply_overrides(config: RunConfig, overrides: List[str]) -> RunConfig:

    '''
        `dotted.path=value` overrides; values parse as JSON when they can, else stay strings
    '''

    payload = json.loads(config.json())
    for item in overrides:

        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form dotted.path=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw

        node, parts = payload, key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigurationError(f"unknown config field {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config field {key!r}")
        node[parts[-1]] = value

    return RunConfig.parse_obj(payload)


def resolve_out(out: str | Path, settings: Settings | None = None) -> Path:

    settings = settings or Settings()
    out = Path(out)
    if out.is_absolute() or settings.output_root is None:
        return out

    return Path(settings.output_root) / out

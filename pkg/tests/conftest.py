from pathlib import Path

import pytest
import torch

from watchtower.wt_attention import MHSAConfig
from watchtower.wt_config import RunConfig
from watchtower.wt_core_math import SeededRng
from watchtower.wt_relation_distill import STRDModule
from watchtower.wt_stream_lm import LMConfig, StreamLM, build_vocab
from watchtower.wt_synth_data import DataConfig
from watchtower.wt_vision_encoder import EncoderConfig, FrameSequence, VisionEncoder

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def rng() -> SeededRng:
    return SeededRng(seed = 7)


@pytest.fixture
def small_mhsa() -> MHSAConfig:
    return MHSAConfig(d_model = 16, n_heads = 2, ffn_mult = 2)


@pytest.fixture
def small_encoder_config(small_mhsa) -> EncoderConfig:
    ## 8x8 frames, 4x4 patches -> N = 4 tokens per frame pair
    return EncoderConfig(height = 8, width = 8, channels = 2, patch = 4, fps = 2.0, mhsa = small_mhsa)


@pytest.fixture
def small_data_config() -> DataConfig:
    return DataConfig(
        n_frames = 16,
        height = 8,
        width = 8,
        channels = 2,
        event_count = (1, 1),
        precursor_pairs = (1, 2),
        anomaly_pairs = (1, 2),
        n_train = 4,
        n_test = 2
    )


@pytest.fixture
def vocab():
    return build_vocab()


@pytest.fixture
def encoder(small_encoder_config, rng) -> VisionEncoder:
    return VisionEncoder(small_encoder_config, rng.spawn("encoder")).freeze()


@pytest.fixture
def strd(small_mhsa, rng) -> STRDModule:
    return STRDModule(small_mhsa, 1, rng.spawn("strd"))


@pytest.fixture
def lm(small_mhsa, vocab, rng) -> StreamLM:
    return StreamLM(LMConfig(mhsa = small_mhsa, depth = 1), vocab.size, rng.spawn("lm"))


@pytest.fixture
def frames(small_encoder_config, rng) -> FrameSequence:
    c = small_encoder_config
    return FrameSequence(frames = rng.spawn("frames").normal((12, c.height, c.width, c.channels), 1.0), fps = c.fps)


@pytest.fixture
def tiny_run_config(tmp_path) -> RunConfig:

    mhsa = {"d_model": 16, "n_heads": 2, "ffn_mult": 2}
    return RunConfig.parse_obj({
        "seed": 3,
        "out": str(tmp_path / "run"),
        "data": {
            "n_frames": 8,
            "height": 8,
            "width": 8,
            "channels": 2,
            "event_count": [1, 1],
            "precursor_pairs": [0, 1],
            "anomaly_pairs": [1, 1],
            "n_train": 4,
            "n_test": 2
        },
        "encoder": {"height": 8, "width": 8, "channels": 2, "patch": 4, "mhsa": mhsa},
        "teacher_depth": 1,
        "distill": {"depth": 1, "epochs": 1, "batch_size": 2, "verbose": False},
        "lm": {"mhsa": mhsa, "depth": 1},
        "pretrain": {"epochs": 1, "batch_size": 2, "verbose": False},
        "finetune": {"epochs": 1, "batch_size": 4, "verbose": False},
        "lora": {"r": 2, "alpha": 4.0},
        "strd_cache_len": 64,
        "lm_cache_len": 256,
        "held_out_streams": 2,
        "bench_pairs": 6
    })


@pytest.fixture
def perturb():

    ## moves every parameter off its (possibly zero) init
    def _perturb(module: torch.nn.Module, rng: SeededRng, scale: float = 0.1) -> None:
        with torch.no_grad():
            for p in module.parameters():
                p.add_(rng.normal(tuple(p.shape), scale))

    return _perturb

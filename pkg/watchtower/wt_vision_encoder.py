from pydantic import BaseModel, validator
from typing import List

import logging

import torch
from torch import Tensor, nn

from watchtower.wt_attention import Linear, MHSAConfig, build_stack, mhsa_full, positional_encode
from watchtower.wt_core_math import DTYPE, SeededRng
from watchtower.wt_errors import ShapeError

logger = logging.getLogger(__name__)


class EncoderConfig(BaseModel):

    height: int = 16
    width: int = 16
    channels: int = 4
    patch: int = 8
    fps: float = 2.0
    mhsa: MHSAConfig = MHSAConfig()

    ## global attention teacher, kept only to measure the loss floor it causes
    teacher_bidirectional: bool = False

    @validator("patch")
    def _patch_tiles_frame(cls, v: int, values: dict) -> int:
        for side in ("height", "width"):
            if side in values and values[side] % v != 0:
                raise ValueError(f"{side} {values[side]} is not divisible by patch size {v}")
        return v

    @validator("fps")
    def _fps_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("fps must be positive")
        return v

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def d_model(self) -> int:
        return self.mhsa.d_model


class FrameSequence(BaseModel):

    frames: Tensor
    fps: float = 2.0

    class Config:
        arbitrary_types_allowed = True

    @validator("frames")
    def _even_frame_count(cls, v: Tensor) -> Tensor:

        if v.dim() != 4:
            raise ShapeError(f"frames must be (T, H, W, C), got {tuple(v.shape)}")

        v = v.to(DTYPE)
        ## odd streams repeat their last frame
        if v.shape[0] % 2 == 1:
            v = torch.cat([v, v[-1:]], dim = 0)

        return v

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.n_frames // 2

    def pair(self, i: int) -> tuple:
        return self.frames[2 * i], self.frames[2 * i + 1]


class TokenBlock(BaseModel):

    pair_index: int
    tokens: Tensor
    timestamp: float

    class Config:
        arbitrary_types_allowed = True


class VisionEncoder(nn.Module):

    def __init__(self, config: EncoderConfig, rng: SeededRng) -> None:

        super().__init__()
        self.config = config
        self.proj = Linear(2 * config.patch * config.patch * config.channels, config.d_model, rng)
        self.frozen = False

    def freeze(self) -> "VisionEncoder":

        for parameter in self.parameters():
            parameter.requires_grad_(False)
        self.frozen = True

        return self

    def patchify(self, frame: Tensor) -> Tensor:

        c = self.config
        if tuple(frame.shape) != (c.height, c.width, c.channels):
            raise ShapeError(
                f"frame shape {tuple(frame.shape)} != encoder input {(c.height, c.width, c.channels)}"
            )

        p = c.patch
        grid = frame.reshape(c.height // p, p, c.width // p, p, c.channels).permute(0, 2, 1, 3, 4)

        return grid.reshape(c.n_patches, p * p * c.channels)


########################
### ENCODE FUNCTIONS ###
########################

def encode_frame_pair(enc: VisionEncoder, f_prev: Tensor, f_curr: Tensor, pair_index: int) -> TokenBlock:

    if f_prev.shape != f_curr.shape:
        raise ShapeError(f"frame pair shapes differ: {tuple(f_prev.shape)} vs {tuple(f_curr.shape)}")

    fused = torch.cat([enc.patchify(f_prev.to(DTYPE)), enc.patchify(f_curr.to(DTYPE))], dim = 1)
    n = enc.config.n_patches
    tokens = positional_encode(enc.proj(fused), pair_index * n)

    return TokenBlock(
        pair_index = pair_index,
        tokens = tokens,
        timestamp = 2 * pair_index / enc.config.fps
    )


def encode_sequence(enc: VisionEncoder, seq: FrameSequence) -> List[TokenBlock]:

    return [encode_frame_pair(enc, *seq.pair(i), pair_index = i) for i in range(seq.n_pairs)]


def build_teacher_stack(config: EncoderConfig, depth: int, rng: SeededRng) -> nn.ModuleList:

    stack = build_stack(config.mhsa, depth, rng.spawn("teacher"))
    for parameter in stack.parameters():
        parameter.requires_grad_(False)

    return stack


def encode_video_teacher(enc: VisionEncoder, teacher_stack: nn.ModuleList, seq: FrameSequence) -> Tensor:

    blocks = encode_sequence(enc, seq)
    n, d = enc.config.n_patches, enc.config.d_model
    if not blocks:
        return torch.zeros(0, d, dtype = DTYPE)

    v_images = torch.cat([b.tokens for b in blocks], dim = 0)
    if v_images.shape[0] != (seq.n_frames // 2) * n:
        raise ShapeError(f"teacher input has {v_images.shape[0]} rows, expected {(seq.n_frames // 2) * n}")

    with torch.no_grad():
        return mhsa_full(list(teacher_stack), v_images, causal = not enc.config.teacher_bidirectional)

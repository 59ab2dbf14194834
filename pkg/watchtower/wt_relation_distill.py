from pydantic import BaseModel, validator
from typing import List, Literal

import logging
import math

import pandas as pd
import torch
from torch import Tensor, nn

from watchtower.wt_attention import KVCache, Linear, MHSAConfig, build_stack, mhsa_full, mhsa_stream
from watchtower.wt_core_math import SeededRng, mse
from watchtower.wt_errors import ConfigurationError, OrderingError, ShapeError, TrainingError
from watchtower.wt_schemas import LossCurveSchema
from watchtower.wt_vision_encoder import (
    FrameSequence,
    TokenBlock,
    VisionEncoder,
    encode_sequence,
    encode_video_teacher
)

logger = logging.getLogger(__name__)


class DistillConfig(BaseModel):

    '''
        Stage-1 optimiser settings
            - AdamW + cosine annealing over 10 epochs, batches of 8 streams
            - lr 3e-3 at toy scale; 1e-4 (the full-size recipe) moves toy weights too little
    '''

    depth: int = 2
    epochs: int = 10
    lr: float = 3e-3
    weight_decay: float = 0.01
    batch_size: int = 8
    verbose: bool = True

    @validator("depth")
    def _depth_in_grid(cls, v: int) -> int:
        if v not in (1, 2, 3):
            raise ValueError(f"distiller depth must be 1, 2 or 3, got {v}")
        return v

    @validator("epochs", "batch_size")
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        return v

    @validator("lr", "weight_decay")
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        return v


class STRDModule(nn.Module):

    '''
        phi(x) = h + out(h), h = blocks(x)
            - block output projections and `out` start at zero, so phi starts as the identity
    '''

    def __init__(self, config: MHSAConfig, depth: int, rng: SeededRng) -> None:

        super().__init__()
        if depth not in (1, 2, 3):
            raise ConfigurationError(f"distiller depth must be 1, 2 or 3, got {depth}")

        self.config = config
        self.depth = depth
        self.blocks = build_stack(config, depth, rng.spawn("strd"), zero_residual = True)
        self.out = Linear(config.d_model, config.d_model, zero_init = True)
        self.distilled = False

    def forward(self, v_images: Tensor) -> Tensor:

        return strd_forward(self, v_images, mode = "offline")

    def new_cache(self, max_len: int) -> KVCache:

        return KVCache(self.depth, max_len, self.config.d_model)

    def freeze(self) -> None:

        for parameter in self.parameters():
            parameter.requires_grad_(False)

        return None


class DistillExample(BaseModel):

    stream_id: str
    v_images: Tensor
    teacher_tokens: Tensor

    class Config:
        arbitrary_types_allowed = True


class DistillReport(BaseModel):

    curve: pd.DataFrame
    initial_held_out: float
    final_held_out: float
    steps: int

    class Config:
        arbitrary_types_allowed = True


##################
### CONCAT OPS ###
##################

def strd_concat(blocks: List[TokenBlock]) -> Tensor:

    if not blocks:
        raise OrderingError("nothing to concatenate")

    indices = [b.pair_index for b in blocks]
    for before, after in zip(indices, indices[1:]):
        if after <= before:
            raise OrderingError(f"pair indices must strictly increase, got {before} then {after}")

    return torch.cat([b.tokens for b in blocks], dim = 0)


def strd_split(v: Tensor, n_patches: int, first_index: int = 0, fps: float = 2.0) -> List[TokenBlock]:

    if v.shape[0] % n_patches != 0:
        raise ShapeError(f"{v.shape[0]} rows do not split into blocks of {n_patches}")

    return [
        TokenBlock(
            pair_index = first_index + i,
            tokens = v[i * n_patches:(i + 1) * n_patches],
            timestamp = 2 * (first_index + i) / fps
        )
        for i in range(v.shape[0] // n_patches)
    ]


###################
### FORWARD OPS ###
###################

def strd_step(strd: STRDModule, cache: KVCache, tokens: Tensor) -> Tensor:

    h = mhsa_stream(list(strd.blocks), cache, tokens)
    return h + strd.out(h)


def strd_forward(
    strd: STRDModule,
    v_images: Tensor,
    mode: Literal["offline", "stream"] = "offline",
    n_patches: int | None = None,
    cache: KVCache | None = None
) -> Tensor:

    if v_images.shape[1] != strd.config.d_model:
        raise ShapeError(f"distiller expects width {strd.config.d_model}, got {v_images.shape[1]}")

    if mode == "offline":
        h = mhsa_full(list(strd.blocks), v_images, causal = True)
        return h + strd.out(h)

    if mode != "stream":
        raise ConfigurationError(f"unknown distiller mode {mode!r}")
    if n_patches is None:
        raise ConfigurationError("streaming mode needs n_patches to cut the token blocks")

    cache = strd.new_cache(max(v_images.shape[0], n_patches)) if cache is None else cache
    outputs = [
        strd_step(strd, cache, v_images[start:start + n_patches])
        for start in range(0, v_images.shape[0], n_patches)
    ]

    return torch.cat(outputs, dim = 0) if outputs else v_images.new_zeros((0, v_images.shape[1]))


def distill_loss(v_video_hat: Tensor, v_images_hat: Tensor) -> Tensor:

    ## teacher side is a constant target
    return mse(v_images_hat, v_video_hat.detach())


########################
### TRAINING HELPERS ###
########################

def make_distill_examples(
    enc: VisionEncoder,
    teacher_stack: nn.ModuleList,
    sequences: List[FrameSequence],
    stream_ids: List[str]
) -> List[DistillExample]:

    examples = []
    for stream_id, seq in zip(stream_ids, sequences):
        with torch.no_grad():
            blocks = encode_sequence(enc, seq)
            examples.append(DistillExample(
                stream_id = stream_id,
                v_images = strd_concat(blocks),
                teacher_tokens = encode_video_teacher(enc, teacher_stack, seq)
            ))

    return examples


def teacher_matching_mse(strd: STRDModule, examples: List[DistillExample]) -> float:

    if not examples:
        raise ValueError("no examples to score")

    with torch.no_grad():
        losses = [distill_loss(ex.teacher_tokens, strd(ex.v_images)).item() for ex in examples]

    return sum(losses) / len(losses)


def train_distill(
    strd: STRDModule,
    dataset: List[DistillExample],
    config: DistillConfig,
    rng: SeededRng,
    held_out: List[DistillExample] | None = None
) -> DistillReport:

    '''
        Stage 1: fit the distiller so streaming tokens match the offline teacher tokens
            - returns the per-epoch loss curve plus held-out loss before/after
            - raises TrainingError with the step index if the loss stops being finite
    '''

    if not dataset:
        raise ConfigurationError("distillation needs at least one example")

    held_out = held_out or dataset
    parameters = [p for p in strd.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(parameters, lr = config.lr, weight_decay = config.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max = config.epochs * steps_per_epoch)

    initial = teacher_matching_mse(strd, held_out)
    if config.verbose:
        logger.info(f"distill start: held-out mse {initial:.6f} over {len(held_out)} streams")

    rows, step = [], 0
    for epoch in range(config.epochs):

        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(dataset), config.batch_size):

            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            optimizer.zero_grad()
            loss = sum(distill_loss(ex.teacher_tokens, strd(ex.v_images)) for ex in batch) / len(batch)
            if not torch.isfinite(loss):
                logger.error(f"distillation loss went non-finite at step {step} 😩")
                raise TrainingError("distillation loss is not finite", step)

            loss.backward()
            optimizer.step()
            scheduler.step()
            epoch_losses.append(loss.item())
            step += 1

        held_out_loss = teacher_matching_mse(strd, held_out)
        rows.append({
            "stage": "distill",
            "epoch": epoch,
            "train_loss": sum(epoch_losses) / len(epoch_losses),
            "held_out_loss": held_out_loss
        })
        if config.verbose:
            logger.info(f"distill epoch {epoch}: train {rows[-1]['train_loss']:.6f} held-out {held_out_loss:.6f}")

    strd.distilled = True

    return DistillReport(
        curve = LossCurveSchema.validate(pd.DataFrame(rows)),
        initial_held_out = initial,
        final_held_out = rows[-1]["held_out_loss"],
        steps = step
    )

from pydantic import BaseModel, validator
from typing import Callable, List, Literal, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from watchtower.wt_errors import (
    DegenerateRowError,
    NumericError,
    ShapeError,
    TargetIndexError
)

'''
    - Matrix is a 2-D torch.float64 tensor; every public op checks shapes up front
    - gradients come from torch autograd, GradTape only records + verifies replay order
'''

DTYPE = torch.float64


class SeededRng(BaseModel):

    seed: int
    algorithm: Literal["pcg64"] = "pcg64"

    _generator: np.random.Generator = None

    class Config:
        underscore_attrs_are_private = True

    def __init__(self, **data) -> None:
        super().__init__(**data)
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    @validator("seed")
    def _seed_fits_64_bits(cls, v: int) -> int:
        if not 0 <= v < 2 ** 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {v}")
        return v

    ######################
    ### USER FUNCTIONS ###
    ######################

    def normal(self, shape: Sequence[int], scale: float = 1.0) -> Tensor:

        return torch.from_numpy(self._generator.normal(0.0, scale, size = tuple(shape))).to(DTYPE)

    def uniform(self, low: float, high: float) -> float:

        return float(self._generator.uniform(low, high))

    def integers(self, low: int, high: int) -> int:

        ## inclusive of both ends
        return int(self._generator.integers(low, high + 1))

    def random(self) -> float:

        return float(self._generator.random())

    def permutation(self, n: int) -> List[int]:

        return [int(i) for i in self._generator.permutation(n)]

    def choice(self, options: Sequence, probabilities: Sequence[float] | None = None):

        index = int(self._generator.choice(len(options), p = probabilities))
        return options[index]

    def spawn(self, key: str) -> "SeededRng":

        ## child stream depends only on (seed, key), never on draws already taken
        sequence = np.random.SeedSequence(entropy = [self.seed, *key.encode("utf-8")])
        return SeededRng(seed = int(sequence.generate_state(1, dtype = np.uint64)[0]))


class TapeEntry(BaseModel):

    op: str
    shape: Tuple[int, ...]


class GradTape(BaseModel):

    entries: List[TapeEntry] = []
    visited: List[str] = []

    def record(self, op: str, out: Tensor) -> Tensor:

        self.entries.append(TapeEntry(op = op, shape = tuple(out.shape)))
        if out.requires_grad:
            out.register_hook(lambda grad, name = op: self._visit(name))

        return out

    def backward(self, loss: Tensor) -> List[str]:

        self.visited = []
        loss.backward()

        return list(self.visited)

    def _visit(self, name: str) -> None:

        self.visited.append(name)

        return None


########################
### MATRIX FUNCTIONS ###
########################

def matmul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:

    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)} 😩")

    return _record(tape, "matmul", a @ b)


def softmax_rows(x: Tensor, mask: Tensor | None = None, tape: GradTape | None = None) -> Tensor:

    '''
        - normalises the last dimension; mask is True where a position may be attended
        - masked entries come out as exact zeros
    '''

    if mask is not None:
        mask = torch.as_tensor(mask, dtype = torch.bool)
        try:
            full_mask = torch.broadcast_to(mask, x.shape)
        except RuntimeError:
            raise ShapeError(f"mask shape {tuple(mask.shape)} does not match {tuple(x.shape)}")
        if (~full_mask).all(dim = -1).any():
            raise DegenerateRowError("softmax row has every entry masked")
        x = x.masked_fill(~full_mask, float("-inf"))

    shifted = x - x.amax(dim = -1, keepdim = True).detach()
    weights = shifted.exp()
    out = weights / weights.sum(dim = -1, keepdim = True)

    return _record(tape, "softmax_rows", out)


def layer_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    eps: float = 1e-5,
    tape: GradTape | None = None
) -> Tensor:

    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"layer_norm gain/bias lengths {gain.shape[-1]}/{bias.shape[-1]} != {x.shape[-1]} channels"
        )

    mean = x.mean(dim = -1, keepdim = True)
    variance = ((x - mean) ** 2).mean(dim = -1, keepdim = True)
    out = (x - mean) / torch.sqrt(variance + eps) * gain + bias

    return _record(tape, "layer_norm", out)


def cross_entropy(logits: Tensor, targets, tape: GradTape | None = None) -> Tensor:

    targets = torch.as_tensor(targets, dtype = torch.long)
    if logits.dim() != 2 or targets.dim() != 1 or targets.shape[0] != logits.shape[0] or logits.shape[0] == 0:
        raise ShapeError(
            f"cross_entropy needs one target per logit row: {tuple(logits.shape)} vs {tuple(targets.shape)}"
        )
    bad = (targets < 0) | (targets >= logits.shape[1])
    if bad.any():
        raise TargetIndexError(
            f"target index {int(targets[bad][0])} out of range for {logits.shape[1]} classes"
        )

    log_probs = logits - torch.logsumexp(logits, dim = 1, keepdim = True)
    loss = -log_probs[torch.arange(logits.shape[0]), targets].mean()

    return _record(tape, "cross_entropy", loss)


def mse(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:

    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.numel() == 0:
        raise ShapeError("mse of empty matrices is undefined")

    ## normalised by every element, not by row count
    return _record(tape, "mse", ((a - b) ** 2).mean())


def finite_diff_check(
    op: Callable[[Tensor], Tensor],
    point: Tensor,
    step: float = 1e-6
) -> float:

    '''
        - max over coordinates of |analytic - central difference| / (|analytic| + 1e-8)
    '''

    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"finite difference step must lie in [1e-7, 1e-3], got {step}")

    x = point.detach().clone().to(DTYPE).requires_grad_(True)
    value = op(x)
    if value.numel() != 1:
        raise ShapeError(f"finite_diff_check needs a scalar op, got shape {tuple(value.shape)}")

    (analytic,) = torch.autograd.grad(value, x)
    if not torch.isfinite(analytic).all():
        raise NumericError("analytic gradient has non-finite entries")

    numeric = torch.zeros_like(analytic)
    flat = point.detach().clone().to(DTYPE).reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):

            plus = flat.clone()
            plus[i] += step
            minus = flat.clone()
            minus[i] -= step

            numeric.view(-1)[i] = (op(plus.view_as(point)) - op(minus.view_as(point))) / (2 * step)

    if not torch.isfinite(numeric).all():
        raise NumericError("central differences produced non-finite values")

    relative = (analytic - numeric).abs() / (analytic.abs() + 1e-8)

    return float(relative.max())


def init_matrix(rng: SeededRng, rows: int, cols: int, scale: float | None = None) -> Tensor:

    ## default fan-in scaling
    scale = (1.0 / rows) ** 0.5 if scale is None else scale
    return rng.normal((rows, cols), scale)


def _record(tape: GradTape | None, op: str, out: Tensor) -> Tensor:

    return out if tape is None else tape.record(op, out)

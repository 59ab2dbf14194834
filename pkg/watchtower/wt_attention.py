from pydantic import BaseModel, validator
from typing import List, Tuple

import logging
import math

import torch
from torch import Tensor, nn
import torch.nn.functional as F

from watchtower.wt_core_math import DTYPE, SeededRng, init_matrix, layer_norm, softmax_rows
from watchtower.wt_errors import ConfigurationError, RankError

logger = logging.getLogger(__name__)


class MHSAConfig(BaseModel):

    d_model: int = 32
    n_heads: int = 4
    ffn_mult: int = 4

    @validator("d_model", "n_heads", "ffn_mult")
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"attention sizes must be >= 1, got {v}")
        return v

    @validator("n_heads")
    def _heads_divide_width(cls, v: int, values: dict) -> int:
        d_model = values.get("d_model")
        if d_model is not None and d_model % v != 0:
            raise ValueError(f"d_model {d_model} is not divisible by n_heads {v}")
        return v

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class Linear(nn.Module):

    '''
        y = x @ W + b, W stored d_in x d_out
            - optional low-rank adapter: y += (alpha / r) * (x @ A) @ B
    '''

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: SeededRng | None = None,
        zero_init: bool = False
    ) -> None:

        super().__init__()
        if zero_init or rng is None:
            weight = torch.zeros(d_in, d_out, dtype = DTYPE)
        else:
            weight = init_matrix(rng, d_in, d_out)

        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype = DTYPE))
        self.register_parameter("lora_a", None)
        self.register_parameter("lora_b", None)
        self.lora_scale = 0.0

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    @property
    def has_adapter(self) -> bool:
        return self.lora_a is not None

    def forward(self, x: Tensor) -> Tensor:

        out = x @ self.weight + self.bias
        if self.lora_a is not None:
            out = out + ((x @ self.lora_a) @ self.lora_b) * self.lora_scale

        return out

    def attach_adapter(self, r: int, alpha: float, rng: SeededRng) -> None:

        if r < 1 or r > min(self.d_in, self.d_out):
            raise RankError(f"adapter rank {r} invalid for a {self.d_in}x{self.d_out} layer")

        ## B starts at zero so the adapted layer equals the base layer exactly
        self.lora_a = nn.Parameter(rng.normal((self.d_in, r), 1.0 / math.sqrt(self.d_in)))
        self.lora_b = nn.Parameter(torch.zeros(r, self.d_out, dtype = DTYPE))
        self.lora_scale = alpha / r
        self.weight.requires_grad_(False)
        self.bias.requires_grad_(False)

        return None

    def effective_weight(self) -> Tensor:

        if self.lora_a is None:
            return self.weight.detach().clone()

        return (self.weight + (self.lora_a @ self.lora_b) * self.lora_scale).detach()

    def merge_adapter(self) -> None:

        if self.lora_a is None:
            return None

        with torch.no_grad():
            self.weight.copy_(self.effective_weight())
        self.lora_a = None
        self.lora_b = None
        self.lora_scale = 0.0

        return None


class MHSABlock(nn.Module):

    '''
        pre-norm block:
            h = x + W_o(attn(LN1(x)))
            y = h + W_2(gelu(W_1(LN2(h))))
    '''

    def __init__(self, config: MHSAConfig, rng: SeededRng, zero_residual: bool = False) -> None:

        super().__init__()
        d, hidden = config.d_model, config.d_model * config.ffn_mult
        self.config = config

        self.ln1_gain = nn.Parameter(torch.ones(d, dtype = DTYPE))
        self.ln1_bias = nn.Parameter(torch.zeros(d, dtype = DTYPE))
        self.w_q = Linear(d, d, rng)
        self.w_k = Linear(d, d, rng)
        self.w_v = Linear(d, d, rng)
        self.w_o = Linear(d, d, rng, zero_init = zero_residual)

        self.ln2_gain = nn.Parameter(torch.ones(d, dtype = DTYPE))
        self.ln2_bias = nn.Parameter(torch.zeros(d, dtype = DTYPE))
        self.ffn1 = Linear(d, hidden, rng)
        self.ffn2 = Linear(hidden, d, rng, zero_init = zero_residual)

        self.last_weights: Tensor | None = None

    def forward(
        self,
        x: Tensor,
        past_k: Tensor | None = None,
        past_v: Tensor | None = None,
        mask: Tensor | None = None
    ) -> Tuple[Tensor, Tensor, Tensor]:

        normed = layer_norm(x, self.ln1_gain, self.ln1_bias)
        q, k, v = self.w_q(normed), self.w_k(normed), self.w_v(normed)

        keys = k if past_k is None else torch.cat([past_k, k], dim = 0)
        values = v if past_v is None else torch.cat([past_v, v], dim = 0)

        h = x + self.w_o(self._attend(q, keys, values, mask))
        out = h + self.ffn2(F.gelu(self.ffn1(layer_norm(h, self.ln2_gain, self.ln2_bias))))

        return out, k, v

    def _attend(self, q: Tensor, keys: Tensor, values: Tensor, mask: Tensor | None) -> Tensor:

        n_heads, d_head = self.config.n_heads, self.config.d_head
        T, S = q.shape[0], keys.shape[0]

        ## (tokens, d) -> (heads, tokens, d_head)
        q_h = q.reshape(T, n_heads, d_head).transpose(0, 1)
        k_h = keys.reshape(S, n_heads, d_head).transpose(0, 1)
        v_h = values.reshape(S, n_heads, d_head).transpose(0, 1)

        scores = q_h @ k_h.transpose(1, 2) / math.sqrt(d_head)
        weights = softmax_rows(scores, mask)
        self.last_weights = weights.detach()

        return (weights @ v_h).transpose(0, 1).reshape(T, n_heads * d_head)


class KVCache:

    '''
        Per-layer ring buffers of post-projection keys / values
            - buffers are preallocated (max_len, d_model) so memory never grows with the stream
            - every layer writes the same slots in a step, then commit() advances the head once
            - position counts every token ever appended
    '''

    def __init__(self, n_layers: int, max_len: int, d_model: int) -> None:

        if max_len < 0 or n_layers < 1:
            raise ConfigurationError(f"bad cache shape: n_layers={n_layers}, max_len={max_len}")

        self.n_layers = n_layers
        self.max_len = max_len
        self.d_model = d_model
        self.keys = [torch.zeros(max_len, d_model, dtype = DTYPE) for _ in range(n_layers)]
        self.values = [torch.zeros(max_len, d_model, dtype = DTYPE) for _ in range(n_layers)]

        self.head = 0
        self.stored = 0
        self.position = 0

    ######################
    ### USER FUNCTIONS ###
    ######################

    def read(self, layer: int) -> Tuple[Tensor, Tensor]:

        ## oldest -> newest
        index = self._chronological_slots()
        return self.keys[layer][index], self.values[layer][index]

    def write(self, layer: int, k: Tensor, v: Tensor) -> None:

        if self.max_len == 0:
            return None

        n_new = k.shape[0]
        kept = min(n_new, self.max_len)
        slots = (self.head + (n_new - kept) + torch.arange(kept)) % self.max_len
        self.keys[layer][slots] = k[n_new - kept:].detach()
        self.values[layer][slots] = v[n_new - kept:].detach()

        return None

    def commit(self, n_new: int) -> None:

        if self.max_len > 0:
            self.head = (self.head + n_new) % self.max_len
        self.stored = min(self.stored + n_new, self.max_len)
        self.position += n_new

        return None

    def clone(self) -> "KVCache":

        other = KVCache(self.n_layers, self.max_len, self.d_model)
        other.keys = [k.clone() for k in self.keys]
        other.values = [v.clone() for v in self.values]
        other.head, other.stored, other.position = self.head, self.stored, self.position

        return other

    ########################
    ### HELPER FUNCTIONS ###
    ########################

    def _chronological_slots(self) -> Tensor:

        if self.stored == 0:
            return torch.zeros(0, dtype = torch.long)

        start = (self.head - self.stored) % self.max_len
        return (start + torch.arange(self.stored)) % self.max_len


#######################
### STACK FUNCTIONS ###
#######################

def build_stack(
    config: MHSAConfig,
    depth: int,
    rng: SeededRng,
    zero_residual: bool = False
) -> nn.ModuleList:

    return nn.ModuleList([
        MHSABlock(config, rng.spawn(f"block-{i}"), zero_residual = zero_residual) for i in range(depth)
    ])


def mhsa_full(blocks: List[MHSABlock], x: Tensor, causal: bool = True) -> Tensor:

    T = x.shape[0]
    if T == 0:
        return x.new_zeros((0, x.shape[1]))

    mask = torch.ones(T, T, dtype = torch.bool).tril() if causal else None
    h = x
    for block in blocks:
        h, _, _ = block(h, mask = mask)

    return h


def mhsa_stream(blocks: List[MHSABlock], cache: KVCache, x_new: Tensor) -> Tensor:

    if cache.n_layers != len(blocks):
        raise ConfigurationError(f"cache has {cache.n_layers} layers, stack has {len(blocks)} 😩")
    if x_new.shape[1] != cache.d_model:
        raise ConfigurationError(f"cache width {cache.d_model} != token width {x_new.shape[1]}")

    T = x_new.shape[0]
    if T == 0:
        return x_new.new_zeros((0, x_new.shape[1]))

    h = x_new
    for layer, block in enumerate(blocks):

        past_k, past_v = cache.read(layer)
        S = past_k.shape[0]

        ## cached positions are all visible; new tokens are causal among themselves
        mask = torch.ones(T, S + T, dtype = torch.bool)
        mask[:, S:] = torch.ones(T, T, dtype = torch.bool).tril()

        h, k, v = block(h, past_k, past_v, mask)
        cache.write(layer, k, v)

    cache.commit(T)

    return h


def sinusoid_table(start_index: int, count: int, d_model: int) -> Tensor:

    positions = torch.arange(start_index, start_index + count, dtype = DTYPE).unsqueeze(1)
    channels = torch.arange(0, d_model, 2, dtype = DTYPE)
    angles = positions * torch.pow(torch.tensor(10000.0, dtype = DTYPE), -channels / d_model)

    table = torch.zeros(count, d_model, dtype = DTYPE)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles[:, : d_model // 2])

    return table


def positional_encode(x: Tensor, start_index: int) -> Tensor:

    if start_index < 0:
        raise ValueError(f"start_index must be >= 0, got {start_index}")

    return x + sinusoid_table(start_index, x.shape[0], x.shape[1])

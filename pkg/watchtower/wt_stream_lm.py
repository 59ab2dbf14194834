from pydantic import BaseModel, root_validator, validator
from typing import Callable, Dict, List, Literal, Tuple

import copy
import logging
import math

import pandas as pd
import torch
from torch import Tensor, nn

from watchtower.lookups import (
    ACTORS,
    ANSWER_FILLERS,
    BOS,
    CATEGORIES,
    CAUSES,
    DESCRIPTIONS,
    ELAPSED_BUCKETS,
    NORMAL_CAPTION,
    PLACES,
    QUERY_END,
    QUERY_START,
    QUERY_TEMPLATES,
    RESPONSE_END,
    ROLE_TOKENS,
    SEVERITY,
    STREAM_EOS,
    TASK_WORDS,
    VAD_LEAD_WORD,
    VAP_LEAD_WORD
)
from watchtower.wt_attention import (
    KVCache,
    Linear,
    MHSAConfig,
    build_stack,
    mhsa_full,
    mhsa_stream,
    positional_encode
)
from watchtower.wt_core_math import DTYPE, SeededRng, layer_norm, softmax_rows
from watchtower.wt_errors import (
    AlignmentError,
    ConfigurationError,
    StageOrderError,
    TrainingError,
    VocabularyError
)
from watchtower.wt_relation_distill import STRDModule
from watchtower.wt_schemas import LossCurveSchema
from watchtower.wt_synth_data import AnnotationSet, QueryRecord
from watchtower.wt_vision_encoder import TokenBlock

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12


#############
### VOCAB ###
#############

class Vocab(BaseModel):

    tokens: List[str]

    _index: Dict[str, int] = {}

    class Config:
        underscore_attrs_are_private = True

    def __init__(self, **data) -> None:
        super().__init__(**data)
        self._index = {token: i for i, token in enumerate(self.tokens)}

    @validator("tokens")
    def _unique(cls, v: List[str]) -> List[str]:
        if len(set(v)) != len(v):
            raise ValueError("vocabulary tokens must be unique")
        return v

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:

        if token not in self._index:
            raise VocabularyError(f"token {token!r} is not in the vocabulary")

        return self._index[token]

    def encode(self, tokens: List[str]) -> List[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: List[int]) -> List[str]:

        for i in ids:
            if not 0 <= i < self.size:
                raise VocabularyError(f"token id {i} outside vocabulary of {self.size}")

        return [self.tokens[i] for i in ids]

    @property
    def eos_id(self) -> int:
        return self._index[STREAM_EOS]

    @property
    def response_end_id(self) -> int:
        return self._index[RESPONSE_END]

    @property
    def category_ids(self) -> Dict[int, str]:
        return {self._index[f"<{c}>"]: c for c in CATEGORIES}

    @property
    def never_decoded(self) -> List[int]:
        return [self._index[t] for t in (STREAM_EOS, BOS, QUERY_START, QUERY_END)]


def build_vocab() -> Vocab:

    words = {*TASK_WORDS.values(), VAP_LEAD_WORD, VAD_LEAD_WORD, *NORMAL_CAPTION, *ANSWER_FILLERS}
    for table in (CAUSES, ACTORS, PLACES, SEVERITY):
        words.update(table.values())
    for group in (*DESCRIPTIONS.values(), *QUERY_TEMPLATES.values()):
        words.update(group)
    words.update(word for _, word in ELAPSED_BUCKETS)

    return Vocab(tokens = [*ROLE_TOKENS, STREAM_EOS, *[f"<{c}>" for c in CATEGORIES], *sorted(words)])


############################
### INTERLEAVED SEQUENCE ###
############################

class InterleavedSequence(BaseModel):

    '''
        One flat token stream: prompt, then per frame pair its visual tokens followed by any
        inserted query / response text.
            - token_ids is -1 at visual positions, visual_rows is -1 at text positions
            - l marks supervised response tokens, f marks frame-final positions followed by silence
    '''

    token_ids: List[int]
    visual_rows: List[int]
    block_index: List[int]
    block_last: List[bool]
    l: List[int]
    f: List[int]
    visual: Tensor
    responses: List[Tuple[int, int, int]] = []

    class Config:
        arbitrary_types_allowed = True

    @root_validator(skip_on_failure = True)
    def _flags_follow_definition(cls, values: dict) -> dict:

        n = len(values["token_ids"])
        for name in ("visual_rows", "block_index", "block_last", "l", "f"):
            if len(values[name]) != n:
                raise ValueError(f"{name} has {len(values[name])} entries for {n} positions")

        l, f = values["l"], values["f"]
        for i in range(n):
            silent_next = i + 1 >= n or l[i + 1] == 0
            expected = 1 if values["block_last"][i] and silent_next else 0
            if f[i] != expected:
                raise ValueError(f"f[{i}]={f[i]} but frame-final/silent-next rule gives {expected}")
            if l[i] and f[i]:
                raise ValueError(f"position {i} is both a response token and a silent frame end")

        return values

    def __len__(self) -> int:
        return len(self.token_ids)

    def segments(self) -> List[Tuple[int, int]]:

        ## one segment per visual block, one per text token
        spans, start = [], 0
        while start < len(self):
            end = start + 1
            if self.token_ids[start] < 0:
                while end < len(self) and self.token_ids[end] < 0 and self.block_index[end] == self.block_index[start]:
                    end += 1
            spans.append((start, end))
            start = end

        return spans


def response_block(frame: int, n_blocks: int) -> int:

    '''
        Frame f is answered after pair block ceil(f / 2)
    '''

    block = -(-frame // 2)
    if frame < 0 or block >= n_blocks:
        raise AlignmentError(f"frame {frame} has no frame-pair block to answer after ({n_blocks} blocks)")

    return block


def build_interleaved(
    annotations: AnnotationSet,
    blocks: List[TokenBlock],
    vocab: Vocab,
    mode: Literal["VAP", "VAD", "VAA", "CAPTION"],
    query_schedule: List[QueryRecord] | None = None
) -> InterleavedSequence:

    n_blocks = len(blocks)
    inserts: Dict[int, List[Tuple[List[int], int]]] = {}

    if mode == "VAA":
        schedule = annotations.vaa if query_schedule is None else query_schedule
        for q in schedule:
            block = response_block(q.frame, n_blocks)
            if block in inserts:
                continue
            inserts[block] = [
                (vocab.encode([QUERY_START, *q.query, QUERY_END]), 0),
                (vocab.encode(q.response_tokens()), 1)
            ]
    else:
        for record in annotations.records(mode):
            block = response_block(record.frame, n_blocks)
            if block in inserts:
                continue
            inserts[block] = [(vocab.encode(record.response_tokens()), 1)]

    token_ids = vocab.encode([BOS, QUERY_START, TASK_WORDS[mode], QUERY_END])
    visual_rows, block_index, block_last, l = [-1] * 4, [-1] * 4, [False] * 4, [0] * 4
    responses, row = [], 0

    for b, block in enumerate(blocks):

        n = block.tokens.shape[0]
        token_ids += [-1] * n
        visual_rows += list(range(row, row + n))
        block_index += [b] * n
        block_last += [False] * (n - 1) + [True]
        l += [0] * n
        row += n

        for ids, supervised in inserts.get(b, []):
            if supervised:
                responses.append((b, len(token_ids), len(token_ids) + len(ids)))
            token_ids += ids
            visual_rows += [-1] * len(ids)
            block_index += [-1] * len(ids)
            block_last += [False] * len(ids)
            l += [supervised] * len(ids)

    f = [
        1 if block_last[i] and (i + 1 >= len(l) or l[i + 1] == 0) else 0
        for i in range(len(l))
    ]
    d = blocks[0].tokens.shape[1] if blocks else 0
    visual = torch.cat([b.tokens for b in blocks], dim = 0) if blocks else torch.zeros(0, d, dtype = DTYPE)

    return InterleavedSequence(
        token_ids = token_ids,
        visual_rows = visual_rows,
        block_index = block_index,
        block_last = block_last,
        l = l,
        f = f,
        visual = visual,
        responses = responses
    )


################
### STREAMLM ###
################

class LMConfig(BaseModel):

    mhsa: MHSAConfig = MHSAConfig()
    depth: int = 2
    zero_head: bool = False

    @validator("depth")
    def _depth(cls, v: int) -> int:
        if v < 1:
            raise ValueError("LM depth must be >= 1")
        return v


class StreamLM(nn.Module):

    def __init__(self, config: LMConfig, vocab_size: int, rng: SeededRng) -> None:

        super().__init__()
        d = config.mhsa.d_model
        self.config = config
        self.vocab_size = vocab_size

        self.tok_embed = nn.Parameter(rng.spawn("embed").normal((vocab_size, d), 1.0))

        ## LM width equals the visual width, so the projector starts as the identity
        self.projector = Linear(d, d)
        with torch.no_grad():
            self.projector.weight.copy_(torch.eye(d, dtype = DTYPE))

        self.blocks = build_stack(config.mhsa, config.depth, rng.spawn("decoder"))
        self.ln_gain = nn.Parameter(torch.ones(d, dtype = DTYPE))
        self.ln_bias = nn.Parameter(torch.zeros(d, dtype = DTYPE))
        self.head = Linear(d, vocab_size, rng.spawn("head"), zero_init = config.zero_head)

    def new_cache(self, max_len: int) -> KVCache:

        return KVCache(self.config.depth, max_len, self.config.mhsa.d_model)

    def embed_tokens(self, ids: List[int]) -> Tensor:

        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise VocabularyError(f"token id {i} outside vocabulary of {self.vocab_size}")

        return self.tok_embed[torch.tensor(ids, dtype = torch.long)]

    def embed(self, seq: InterleavedSequence, visual: Tensor | None = None) -> Tensor:

        visual = seq.visual if visual is None else visual
        ids = torch.tensor(seq.token_ids, dtype = torch.long)
        rows = torch.tensor(seq.visual_rows, dtype = torch.long)
        is_visual = ids < 0

        bad = (ids >= self.vocab_size) | (is_visual & (rows < 0))
        if bad.any():
            raise VocabularyError(f"token id {int(ids[bad][0])} outside vocabulary of {self.vocab_size}")

        text = self.tok_embed[ids.clamp(min = 0)]
        if visual.shape[0] == 0:
            return text

        pictures = self.projector(visual)[rows.clamp(min = 0)]
        return torch.where(is_visual.unsqueeze(1), pictures, text)

    def readout(self, h: Tensor) -> Tensor:

        return softmax_rows(self.head(layer_norm(h, self.ln_gain, self.ln_bias)))


def lm_step(model: StreamLM, cache: KVCache, x_rows: Tensor) -> Tensor:

    '''
        Streams already-embedded rows through the decoder, positions continue from the cache
    '''

    h = mhsa_stream(list(model.blocks), cache, positional_encode(x_rows, cache.position))
    return model.readout(h)


def lm_forward(
    model: StreamLM,
    seq: InterleavedSequence,
    mode: Literal["full", "stream"] = "full",
    cache: KVCache | None = None,
    visual: Tensor | None = None
) -> Tensor:

    x = model.embed(seq, visual)
    if len(seq) == 0:
        return x.new_zeros((0, model.vocab_size))

    if mode == "full":
        h = mhsa_full(list(model.blocks), positional_encode(x, 0), causal = True)
        return model.readout(h)

    if mode != "stream":
        raise ConfigurationError(f"unknown LM mode {mode!r}")

    cache = model.new_cache(len(seq)) if cache is None else cache
    return torch.cat([lm_step(model, cache, x[start:end]) for start, end in seq.segments()], dim = 0)


##################
### JOINT LOSS ###
##################

class JointLossParts(BaseModel):

    text_sum: Tensor
    eos_sum: Tensor
    n_text: int
    n_eos: int
    floored: int

    class Config:
        arbitrary_types_allowed = True

    def normaliser(self, w: float) -> int:

        ## eos positions only count when their term carries weight
        return self.n_text + (self.n_eos if w > 0 else 0)

    def text_part(self, w: float) -> Tensor:
        return self.text_sum / max(self.normaliser(w), 1)

    def eos_part(self, w: float) -> Tensor:
        return self.eos_sum / max(self.normaliser(w), 1)

    def total(self, w: float) -> Tensor:
        return (self.text_sum + w * self.eos_sum) / max(self.normaliser(w), 1)


def joint_loss_parts(probs: Tensor, seq: InterleavedSequence, eos_id: int) -> JointLossParts:

    n = len(seq)
    text_positions = [i for i in range(n - 1) if seq.l[i + 1] == 1]
    eos_positions = [i for i in range(n) if seq.f[i] == 1]

    text_probs = probs[
        torch.tensor(text_positions, dtype = torch.long),
        torch.tensor([seq.token_ids[i + 1] for i in text_positions], dtype = torch.long)
    ]
    eos_probs = probs[
        torch.tensor(eos_positions, dtype = torch.long),
        torch.full((len(eos_positions),), eos_id, dtype = torch.long)
    ]

    floored = int((text_probs < PROBABILITY_FLOOR).sum() + (eos_probs < PROBABILITY_FLOOR).sum())
    if floored:
        logger.warning(f"{floored} probabilities floored at {PROBABILITY_FLOOR}")

    return JointLossParts(
        text_sum = -torch.log(text_probs.clamp(min = PROBABILITY_FLOOR)).sum(),
        eos_sum = -torch.log(eos_probs.clamp(min = PROBABILITY_FLOOR)).sum(),
        n_text = len(text_positions),
        n_eos = len(eos_positions),
        floored = floored
    )


def joint_loss(probs: Tensor, seq: InterleavedSequence, w: float, eos_id: int) -> Tensor:

    if w < 0:
        raise ValueError(f"EOS loss weight must be >= 0, got {w}")

    return joint_loss_parts(probs, seq, eos_id).total(w)


############
### LORA ###
############

class LoRAConfig(BaseModel):

    '''
        Low-rank adapter settings. Toy default r=4, alpha=8 keeps the full-size
        r=32 / alpha=64 ratio of alpha / r = 2.
    '''

    r: int = 4
    alpha: float = 8.0
    targets: List[str] | None = None

    @validator("r")
    def _rank_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("LoRA rank must be >= 1")
        return v


def lora_targets(model: nn.Module, config: LoRAConfig) -> List[Tuple[str, Linear]]:

    layers = [(name, m) for name, m in model.named_modules() if isinstance(m, Linear)]
    if config.targets is None:
        return layers

    known = {name for name, _ in layers}
    missing = [t for t in config.targets if t not in known]
    if missing:
        raise ConfigurationError(f"LoRA targets not found in model: {missing}")

    return [(name, m) for name, m in layers if name in config.targets]


def apply_lora(model: StreamLM, config: LoRAConfig, rng: SeededRng) -> StreamLM:

    '''
        Returns an adapted copy; the base model is left untouched
            - every base parameter frozen, only adapter A/B matrices train
    '''

    adapted = copy.deepcopy(model)
    targets = lora_targets(adapted, config)
    for parameter in adapted.parameters():
        parameter.requires_grad_(False)

    for name, layer in targets:
        layer.attach_adapter(config.r, config.alpha, rng.spawn(f"lora-{name}"))

    return adapted


def merge_lora(model: StreamLM) -> StreamLM:

    for module in model.modules():
        if isinstance(module, Linear):
            module.merge_adapter()

    return model


def adapter_state(model: nn.Module) -> Dict[str, Tensor]:

    return {k: v for k, v in model.state_dict().items() if ".lora_" in k}


################
### TRAINING ###
################

class FinetuneConfig(BaseModel):

    epochs: int = 2
    lr: float = 2e-3
    weight_decay: float = 0.0
    batch_size: int = 8
    w: float = 1.0
    strd_setting: Literal["baseline", "no-pretrain", "no-finetune", "full"] = "full"
    verbose: bool = True

    @validator("w", "lr", "weight_decay")
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("w, lr and weight_decay must be >= 0")
        return v


class PretrainConfig(BaseModel):

    epochs: int = 3
    lr: float = 3e-3
    weight_decay: float = 0.01
    batch_size: int = 8
    caption_every: int = 3
    verbose: bool = True


class LMExample(BaseModel):

    stream_id: str
    mode: str
    seq: InterleavedSequence
    v_images: Tensor

    class Config:
        arbitrary_types_allowed = True


class StageReport(BaseModel):

    model: nn.Module
    curve: pd.DataFrame
    initial_held_out: float
    final_held_out: float
    steps: int

    class Config:
        arbitrary_types_allowed = True


def example_loss(
    model: StreamLM,
    strd: STRDModule | None,
    example: LMExample,
    w: float,
    eos_id: int
) -> Tensor:

    visual = example.v_images if strd is None else strd(example.v_images)
    return joint_loss(lm_forward(model, example.seq, visual = visual), example.seq, w, eos_id)


def held_out_loss(
    model: StreamLM,
    strd: STRDModule | None,
    examples: List[LMExample],
    w: float,
    eos_id: int
) -> float:

    with torch.no_grad():
        losses = [example_loss(model, strd, ex, w, eos_id).item() for ex in examples]

    return sum(losses) / len(losses) if losses else float("nan")


def _fit(
    stage: str,
    parameters: List[nn.Parameter],
    examples: List[LMExample],
    loss_fn: Callable[[LMExample], Tensor],
    score_fn: Callable[[], float],
    epochs: int,
    lr: float,
    weight_decay: float,
    batch_size: int,
    rng: SeededRng,
    verbose: bool
) -> Tuple[List[Dict], int]:

    optimizer = torch.optim.AdamW(parameters, lr = lr, weight_decay = weight_decay)
    steps_per_epoch = math.ceil(len(examples) / batch_size)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max = max(epochs * steps_per_epoch, 1))

    rows, step = [], 0
    for epoch in range(epochs):

        order = rng.permutation(len(examples))
        losses = []
        for start in range(0, len(examples), batch_size):

            batch = [examples[i] for i in order[start:start + batch_size]]
            optimizer.zero_grad()
            loss = sum(loss_fn(ex) for ex in batch) / len(batch)
            if not torch.isfinite(loss):
                logger.error(f"{stage} loss went non-finite at step {step} 😩")
                raise TrainingError(f"{stage} loss is not finite", step)

            loss.backward()
            optimizer.step()
            scheduler.step()
            losses.append(loss.item())
            step += 1

        rows.append({
            "stage": stage,
            "epoch": epoch,
            "train_loss": sum(losses) / len(losses),
            "held_out_loss": score_fn()
        })
        if verbose:
            logger.info(f"{stage} epoch {epoch}: train {rows[-1]['train_loss']:.5f} held-out {rows[-1]['held_out_loss']:.5f}")

    return rows, step


def pretrain_lm(
    model: StreamLM,
    examples: List[LMExample],
    config: PretrainConfig,
    rng: SeededRng,
    held_out: List[LMExample] | None = None
) -> StageReport:

    '''
        Base captioning stage: every parameter trains on caption text, no EOS term
    '''

    if not examples:
        raise ConfigurationError("pretraining needs at least one example")

    held_out = held_out or examples
    eos_id = build_vocab().eos_id
    initial = held_out_loss(model, None, held_out, 0.0, eos_id)

    rows, steps = _fit(
        stage = "pretrain",
        parameters = [p for p in model.parameters() if p.requires_grad],
        examples = examples,
        loss_fn = lambda ex: example_loss(model, None, ex, 0.0, eos_id),
        score_fn = lambda: held_out_loss(model, None, held_out, 0.0, eos_id),
        epochs = config.epochs,
        lr = config.lr,
        weight_decay = config.weight_decay,
        batch_size = config.batch_size,
        rng = rng,
        verbose = config.verbose
    )

    return StageReport(
        model = model,
        curve = LossCurveSchema.validate(pd.DataFrame(rows)),
        initial_held_out = initial,
        final_held_out = rows[-1]["held_out_loss"] if rows else initial,
        steps = steps
    )


def train_finetune(
    model: StreamLM,
    strd: STRDModule | None,
    examples: List[LMExample],
    config: FinetuneConfig,
    lora: LoRAConfig,
    rng: SeededRng,
    held_out: List[LMExample] | None = None
) -> StageReport:

    '''
        Stage 2: LoRA on every LM linear layer plus the distiller's output layer
            - distiller attention blocks stay frozen
            - "no-finetune" also freezes the distiller output layer, "baseline" runs without it
    '''

    setting = config.strd_setting
    if setting == "baseline" and strd is not None:
        raise ConfigurationError("the baseline setting runs without a distiller")
    if setting != "baseline" and strd is None:
        raise ConfigurationError(f"setting {setting!r} needs a distiller")
    if setting in ("full", "no-finetune") and not strd.distilled:
        raise StageOrderError("distiller has not been through stage-1 distillation yet")
    if not examples:
        raise ConfigurationError("fine-tuning needs at least one example")

    adapted = apply_lora(model, lora, rng.spawn("lora"))
    parameters = [p for p in adapted.parameters() if p.requires_grad]
    if strd is not None:
        strd.freeze()
        if setting != "no-finetune":
            for parameter in strd.out.parameters():
                parameter.requires_grad_(True)
            parameters += list(strd.out.parameters())

    held_out = held_out or examples
    eos_id = build_vocab().eos_id
    initial = held_out_loss(adapted, strd, held_out, config.w, eos_id)
    if config.verbose:
        logger.info(f"finetune start ({setting}): held-out joint loss {initial:.5f}")

    rows, steps = _fit(
        stage = "finetune",
        parameters = parameters,
        examples = examples,
        loss_fn = lambda ex: example_loss(adapted, strd, ex, config.w, eos_id),
        score_fn = lambda: held_out_loss(adapted, strd, held_out, config.w, eos_id),
        epochs = config.epochs,
        lr = config.lr,
        weight_decay = config.weight_decay,
        batch_size = config.batch_size,
        rng = rng,
        verbose = config.verbose
    )

    return StageReport(
        model = adapted,
        curve = LossCurveSchema.validate(pd.DataFrame(rows)),
        initial_held_out = initial,
        final_held_out = rows[-1]["held_out_loss"] if rows else initial,
        steps = steps
    )

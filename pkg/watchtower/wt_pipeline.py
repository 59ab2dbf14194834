from pydantic import BaseModel, Field
from typing import Dict, List, Tuple

import json
import logging
import statistics
from pathlib import Path

import pandas as pd
import torch
from torch import nn

from watchtower.wt_checkpoint import load_checkpoint, save_checkpoint
from watchtower.wt_config import RunConfig, Settings, resolve_out
from watchtower.wt_core_math import SeededRng
from watchtower.wt_errors import CheckpointError, ConfigHashError, StageOrderError, UndefinedMetricError
from watchtower.wt_metrics import MetricReport, StreamTruth, WT_Evaluator, lm_ppl
from watchtower.wt_relation_distill import (
    DistillExample,
    STRDModule,
    make_distill_examples,
    strd_concat,
    teacher_matching_mse,
    train_distill
)
from watchtower.wt_scheduler import (
    QueryRequest,
    SessionConfig,
    WT_Session,
    read_event_log,
    write_event_log
)
from watchtower.wt_schemas import (
    EVENT_COLUMNS,
    TRACE_COLUMNS,
    AblationSchema,
    BenchSchema,
    EosTraceSchema,
    EventLogSchema
)
from watchtower.wt_stream_lm import (
    LMExample,
    StreamLM,
    Vocab,
    adapter_state,
    apply_lora,
    build_interleaved,
    build_vocab,
    pretrain_lm,
    train_finetune
)
from watchtower.wt_synth_data import (
    AnnotationSet,
    StreamRecord,
    WT_Dataset,
    caption_records,
    generate_dataset
)
from watchtower.wt_vision_encoder import (
    FrameSequence,
    VisionEncoder,
    build_teacher_stack,
    encode_sequence
)

logger = logging.getLogger(__name__)


class Components(BaseModel):

    enc: VisionEncoder
    teacher_stack: nn.ModuleList
    vocab: Vocab

    class Config:
        arbitrary_types_allowed = True


class WT_Pipeline(BaseModel):

    '''
        Stage bodies behind the CLI. Every stage works inside one run directory:
            - run_config.json pins the config hash; a different config in the same directory is refused
            - models are rebuilt from the seed and overwritten from checkpoints, never pickled
    '''

    config: RunConfig
    settings: Settings = Field(default_factory = Settings)
    verbose: bool = True

    @property
    def run_dir(self) -> Path:
        return resolve_out(self.config.out, self.settings)

    @property
    def config_hash(self) -> str:
        return self.config.config_hash

    def path(self, name: str) -> Path:
        return self.run_dir / name

    ######################
    ### USER FUNCTIONS ###
    ######################

    def gen_data(self) -> WT_Dataset:

        self._stamp()
        dataset = generate_dataset(self.config.data, self.config.seed, config_hash = self.config_hash)
        dataset.serialize(self.path("dataset.jsonl"))
        with open(self.path("split_manifest.json"), "w", encoding = "utf-8") as fh:
            fh.write(json.dumps(dataset.split_manifest(), sort_keys = True, indent = 2) + "\n")

        if self.verbose:
            logger.info(f"gen-data: {len(dataset.train)} train / {len(dataset.test)} test streams in {self.run_dir}")

        return dataset

    def distill(self) -> STRDModule:

        self._stamp()
        dataset = self.load_dataset()
        parts = self.components()
        strd = self.fresh_strd()

        train = self._distill_examples(parts, dataset, dataset.train)
        held_out = self._distill_examples(parts, dataset, dataset.test[:self.config.held_out_streams])
        report = train_distill(strd, train, self.config.distill, SeededRng(seed = self.config.seed).spawn("distill"), held_out)

        report.curve.to_csv(self.path("distill_curve.csv"), index = False)
        save_checkpoint(
            self.path("strd.pt"),
            kind = "strd",
            state = strd.state_dict(),
            config_hash = self.config_hash,
            meta = {"distilled": True, "initial_held_out": report.initial_held_out, "final_held_out": report.final_held_out}
        )

        return strd

    def train(self, no_strd: bool = False) -> Tuple[StreamLM, STRDModule | None]:

        self._stamp()
        setting = "baseline" if no_strd else self.config.finetune.strd_setting
        finetune = self.config.finetune.copy(update = {"strd_setting": setting})
        if setting in ("full", "no-finetune") and not self.path("strd.pt").exists():
            raise CheckpointError(f"train needs a distill checkpoint in {self.run_dir} (or --no-strd)")

        dataset = self.load_dataset()
        parts = self.components()
        base = self.base_lm(dataset, parts)

        strd = None if setting == "baseline" else (self.fresh_strd() if setting == "no-pretrain" else self.load_strd())
        rng = SeededRng(seed = self.config.seed).spawn("finetune")
        examples = self._lm_examples(parts, dataset, dataset.train, self.config.train_modes)
        held_out = self._lm_examples(parts, dataset, dataset.test[:self.config.held_out_streams], self.config.train_modes)

        report = train_finetune(base, strd, examples, finetune, self.config.lora, rng, held_out)
        report.curve.to_csv(self.path("finetune_curve.csv"), index = False)

        state = adapter_state(report.model)
        if strd is not None:
            state.update({f"strd_out.{k}": v for k, v in strd.out.state_dict().items()})
        save_checkpoint(self.path("adapters.pt"), kind = "adapters", state = state, config_hash = self.config_hash, meta = {"setting": setting})

        return report.model, strd

    def run(
        self,
        mode: str,
        gamma: float | None = None,
        stream_ids: List[str] | None = None,
        commit_responses: bool = True,
        tag: str | None = None
    ) -> Tuple[pd.DataFrame, pd.DataFrame]:

        self._stamp()
        dataset = self.load_dataset()
        parts = self.components()
        lm, strd = self.load_trained()

        session_config = SessionConfig(
            mode = mode,
            gamma = self.config.gamma[mode] if gamma is None else gamma,
            strd_cache_len = self.config.strd_cache_len,
            lm_cache_len = self.config.lm_cache_len,
            max_response_len = self.config.max_response_len,
            commit_responses = commit_responses
        )
        streams = dataset.test if stream_ids is None else [dataset.stream(s) for s in stream_ids]

        events, traces = [], []
        for stream in streams:
            session = WT_Session(parts.enc, strd, lm, parts.vocab, session_config, stream_id = stream.stream_id)
            queries = [QueryRequest(tokens = q.query, t = q.frame / dataset.config.fps) for q in stream.annotations.vaa] if mode == "VAA" else None
            result = session.run_stream(dataset.render(stream), queries)
            events.append(result.events)
            traces.append(result.trace)

        events = pd.concat(events, ignore_index = True) if events else EventLogSchema.validate(pd.DataFrame(columns = EVENT_COLUMNS))
        trace = EosTraceSchema.validate(pd.concat(traces, ignore_index = True) if traces else pd.DataFrame(columns = TRACE_COLUMNS))

        tag = tag or mode
        write_event_log(self.path(f"events_{tag}.jsonl"), events, self.config_hash)
        trace.to_csv(self.path(f"trace_{tag}.csv"), index = False)
        if self.verbose:
            logger.info(f"run {tag} (gamma={session_config.gamma}): {len(events)} responses over {len(streams)} streams")

        return events, trace

    def evaluate(
        self,
        mode: str,
        events_path: str | Path | None = None,
        dataset_path: str | Path | None = None,
        trace_path: str | Path | None = None,
        tag: str | None = None,
        with_ppl: bool = True
    ) -> MetricReport:

        tag = tag or mode
        explicit = events_path is not None or dataset_path is not None
        events_path = Path(events_path or self.path(f"events_{tag}.jsonl"))
        trace_path = trace_path or (None if explicit else self.path(f"trace_{tag}.csv"))
        if not events_path.exists():
            raise CheckpointError(f"missing event log: {events_path}")

        header, events = read_event_log(events_path)
        dataset = WT_Dataset.load(dataset_path) if dataset_path is not None else self.load_dataset()
        if header["config_hash"] != dataset.config_hash:
            raise ConfigHashError(
                f"event log {events_path} was made under config {header['config_hash']}, dataset under {dataset.config_hash}"
            )

        ## scored over the whole test split, a stream missing from the log counts as silent
        truths = [
            StreamTruth(stream_id = s.stream_id, timeline = s.timeline, annotations = s.annotations, fps = dataset.config.fps)
            for s in dataset.test
        ]
        traces = pd.read_csv(trace_path) if trace_path is not None and Path(trace_path).exists() else None

        ppl = None
        if with_ppl and not explicit and self.path("adapters.pt").exists():
            try:
                ppl = self._test_ppl(dataset, mode)
            except UndefinedMetricError as e:
                logger.warning(f"no perplexity for {mode}: {e}")

        report = WT_Evaluator(matching = self.config.matching, verbose = self.verbose).evaluate(events, truths, mode, traces, ppl)

        out = self.run_dir
        out.mkdir(parents = True, exist_ok = True)
        with open(out / f"report_{tag}.json", "w", encoding = "utf-8") as fh:
            fh.write(json.dumps({**report.summary(), "config_hash": header["config_hash"]}, sort_keys = True, indent = 2) + "\n")
        if report.per_category is not None:
            report.per_category.to_csv(out / f"per_category_{tag}.csv", index = False)

        return report

    def ablate(self, study: str) -> pd.DataFrame:

        self._stamp()
        if study == "gamma":
            rows = self._gamma_sweep()
        elif study == "depth":
            rows = []
            for depth in (1, 2, 3):
                rows += self._sub_run("depth", f"depth-{depth}", {"distill": {"depth": depth}}, self.config.seed)
        else:
            rows = []
            for seed in self.config.ablation_seeds:
                for setting in ("baseline", "no-pretrain", "no-finetune", "full"):
                    rows += self._sub_run("strd", setting, {"finetune": {"strd_setting": setting}}, seed)
            rows += self._efficacy()

        table = AblationSchema.validate(pd.DataFrame(rows))
        table.to_csv(self.path(f"ablation_{study}.csv"), index = False)

        return table

    def bench(self, n_pairs: int | None = None) -> pd.DataFrame:

        '''
            Per-step latency vs cache length {N, 4N, 16N} on a long noise stream.
            Untrained weights are fine: cost depends on shapes only.
        '''

        self._stamp()
        n_pairs = n_pairs or self.config.bench_pairs
        parts = self.components()
        n = self.config.encoder.n_patches
        rng = SeededRng(seed = self.config.seed).spawn("bench")
        c = self.config.data
        seq = FrameSequence(frames = rng.normal((2 * n_pairs, c.height, c.width, c.channels), 1.0), fps = c.fps)
        strd, lm = self.fresh_strd(), self.fresh_lm(parts.vocab)

        rows = []
        for max_len in (n, 4 * n, 16 * n):

            session = WT_Session(
                parts.enc,
                strd,
                lm,
                parts.vocab,
                SessionConfig(mode = "VAA", strd_cache_len = max_len, lm_cache_len = max_len),
                stream_id = f"bench-{max_len}"
            )
            result = session.run_stream(seq)
            half = len(result.step_ms) // 2
            rows.append({
                "max_len": max_len,
                "receptive_field_s": max_len / n * 2 / c.fps,
                "pairs_per_s": result.pairs_per_s,
                **result.latency_ms,
                "early_median_ms": statistics.median(result.step_ms[:half]) if half else 0.0,
                "late_median_ms": statistics.median(result.step_ms[half:]) if result.step_ms else 0.0
            })
            if self.verbose:
                logger.info(f"bench max_len={max_len}: {result.pairs_per_s:.1f} pairs/s, p50 {result.latency_ms['p50_ms']:.2f} ms")

        table = BenchSchema.validate(pd.DataFrame(rows))
        table.to_csv(self.path("bench.csv"), index = False)

        return table

    ######################
    ### MODEL PLUMBING ###
    ######################

    def components(self) -> Components:

        rng = SeededRng(seed = self.config.seed)
        return Components(
            enc = VisionEncoder(self.config.encoder, rng.spawn("encoder")).freeze(),
            teacher_stack = build_teacher_stack(self.config.encoder, self.config.teacher_depth, rng.spawn("teacher-stack")),
            vocab = build_vocab()
        )

    def fresh_strd(self) -> STRDModule:

        return STRDModule(self.config.encoder.mhsa, self.config.distill.depth, SeededRng(seed = self.config.seed).spawn("strd-init"))

    def fresh_lm(self, vocab: Vocab) -> StreamLM:

        return StreamLM(self.config.lm, vocab.size, SeededRng(seed = self.config.seed).spawn("lm-init"))

    def load_dataset(self) -> WT_Dataset:

        path = self.path("dataset.jsonl")
        if not path.exists():
            raise CheckpointError(f"no dataset in {self.run_dir}; run gen-data first")

        dataset = WT_Dataset.load(path)
        if dataset.config_hash != self.config_hash:
            raise ConfigHashError(f"dataset {path} was made under config {dataset.config_hash}, current config is {self.config_hash}")

        return dataset

    def load_strd(self) -> STRDModule:

        header, state = load_checkpoint(self.path("strd.pt"), "strd", self.config_hash)
        strd = self.fresh_strd()
        strd.load_state_dict(state)
        strd.distilled = bool(header.meta.get("distilled", False))

        return strd

    def base_lm(self, dataset: WT_Dataset, parts: Components) -> StreamLM:

        '''
            Caption-pretrained base LM, trained once per run directory and cached as lm_base.pt
        '''

        lm = self.fresh_lm(parts.vocab)
        path = self.path("lm_base.pt")
        if path.exists():
            _, state = load_checkpoint(path, "lm_base", self.config_hash)
            lm.load_state_dict(state)
            return lm

        every = self.config.pretrain.caption_every
        examples = self._lm_examples(parts, dataset, dataset.train, ["CAPTION"], every)
        held_out = self._lm_examples(parts, dataset, dataset.test[:self.config.held_out_streams], ["CAPTION"], every)
        report = pretrain_lm(lm, examples, self.config.pretrain, SeededRng(seed = self.config.seed).spawn("pretrain"), held_out)

        report.curve.to_csv(self.path("pretrain_curve.csv"), index = False)
        save_checkpoint(path, kind = "lm_base", state = lm.state_dict(), config_hash = self.config_hash)

        return lm

    def load_trained(self) -> Tuple[StreamLM, STRDModule | None]:

        header, state = load_checkpoint(self.path("adapters.pt"), "adapters", self.config_hash)
        setting = header.meta.get("setting", "full")

        _, base_state = load_checkpoint(self.path("lm_base.pt"), "lm_base", self.config_hash)
        lm = self.fresh_lm(build_vocab())
        lm.load_state_dict(base_state)
        lm = apply_lora(lm, self.config.lora, SeededRng(seed = self.config.seed).spawn("finetune").spawn("lora"))
        lm.load_state_dict({k: v for k, v in state.items() if not k.startswith("strd_out.")}, strict = False)

        if setting == "baseline":
            return lm, None

        strd = self.fresh_strd() if setting == "no-pretrain" else self.load_strd()
        strd.out.load_state_dict({k[len("strd_out."):]: v for k, v in state.items() if k.startswith("strd_out.")})
        strd.freeze()

        return lm, strd

    ########################
    ### HELPER FUNCTIONS ###
    ########################

    def _stamp(self) -> None:

        self.run_dir.mkdir(parents = True, exist_ok = True)
        path = self.path("run_config.json")
        if path.exists():
            with open(path, "r", encoding = "utf-8") as fh:
                existing = json.load(fh)
            if existing.get("config_hash") != self.config_hash:
                raise ConfigHashError(
                    f"{self.run_dir} belongs to config {existing.get('config_hash')}, current config is {self.config_hash}"
                )
            return None

        with open(path, "w", encoding = "utf-8") as fh:
            fh.write(json.dumps(self.config.stamp(), sort_keys = True, indent = 2) + "\n")

        return None

    def _distill_examples(self, parts: Components, dataset: WT_Dataset, streams: List[StreamRecord]) -> List[DistillExample]:

        return make_distill_examples(
            parts.enc,
            parts.teacher_stack,
            [dataset.render(s) for s in streams],
            [s.stream_id for s in streams]
        )

    def _lm_examples(
        self,
        parts: Components,
        dataset: WT_Dataset,
        streams: List[StreamRecord],
        modes: List[str],
        caption_every: int = 3
    ) -> List[LMExample]:

        examples = []
        for s in streams:
            with torch.no_grad():
                blocks = encode_sequence(parts.enc, dataset.render(s))
            annotations = s.annotations
            if "CAPTION" in modes:
                annotations = AnnotationSet(captions = caption_records(s.timeline, caption_every))
            for mode in modes:
                examples.append(LMExample(
                    stream_id = s.stream_id,
                    mode = mode,
                    seq = build_interleaved(annotations, blocks, parts.vocab, mode),
                    v_images = strd_concat(blocks)
                ))

        return examples

    def _test_ppl(self, dataset: WT_Dataset, mode: str) -> float:

        parts = self.components()
        lm, strd = self.load_trained()
        examples = self._lm_examples(parts, dataset, dataset.test, [mode])
        with torch.no_grad():
            visuals = [ex.v_images if strd is None else strd(ex.v_images) for ex in examples]

        return lm_ppl(lm, [ex.seq for ex in examples], parts.vocab.eos_id, visuals)

    def _sub_run(self, study: str, setting: str, update: Dict, seed: int) -> List[Dict]:

        payload = json.loads(self.config.json())
        for section, fields in update.items():
            payload[section].update(fields)
        payload["seed"] = seed
        payload["out"] = str(Path(self.config.out) / "ablate" / study / f"{setting}-s{seed}")
        sub = WT_Pipeline(config = RunConfig.parse_obj(payload), settings = self.settings, verbose = self.verbose)

        if not sub.path("dataset.jsonl").exists():
            sub.gen_data()
        needs_strd = payload["finetune"]["strd_setting"] in ("full", "no-finetune")
        if needs_strd and not sub.path("strd.pt").exists():
            sub.distill()
        if not sub.path("adapters.pt").exists():
            sub.train(no_strd = payload["finetune"]["strd_setting"] == "baseline")

        rows = []
        for mode in ("VAP", "VAD"):
            sub.run(mode)
            report = sub.evaluate(mode)
            rows += [
                {"study": study, "setting": f"{setting}/{mode}", "seed": seed, "metric": "weighted_f1", "value": report.weighted_f1_pct},
                {"study": study, "setting": f"{setting}/{mode}", "seed": seed, "metric": "time_diff", "value": report.time_diff_seconds},
                {"study": study, "setting": f"{setting}/{mode}", "seed": seed, "metric": "lm_ppl", "value": report.lm_ppl}
            ]

        return rows

    def _efficacy(self) -> List[Dict]:

        '''
            Held-out teacher-matching MSE, distilled vs freshly initialised distiller, per seed
        '''

        rows = []
        for seed in self.config.efficacy_seeds:

            sub = WT_Pipeline(
                config = self.config.copy(update = {"seed": seed, "out": str(Path(self.config.out) / "ablate" / "efficacy" / f"s{seed}")}),
                settings = self.settings,
                verbose = self.verbose
            )
            if not sub.path("dataset.jsonl").exists():
                sub.gen_data()
            dataset, parts = sub.load_dataset(), sub.components()
            held_out = sub._distill_examples(parts, dataset, dataset.test[:self.config.held_out_streams])

            untrained = teacher_matching_mse(sub.fresh_strd(), held_out)
            distilled = teacher_matching_mse(sub.distill(), held_out)
            rows += [
                {"study": "efficacy", "setting": "untrained", "seed": seed, "metric": "teacher_mse", "value": untrained},
                {"study": "efficacy", "setting": "distilled", "seed": seed, "metric": "teacher_mse", "value": distilled}
            ]

        return rows

    def _gamma_sweep(self) -> List[Dict]:

        if not self.path("adapters.pt").exists():
            raise StageOrderError(f"the gamma sweep needs a trained model in {self.run_dir}")

        rows = []
        for mode in ("VAP", "VAD"):
            for gamma in self.config.gamma_grid:
                tag = f"{mode}-g{gamma:.2f}"
                events, _ = self.run(mode, gamma = gamma, commit_responses = False, tag = tag)
                report = self.evaluate(mode, tag = tag, with_ppl = False)
                rows += [
                    {"study": "gamma", "setting": tag, "seed": self.config.seed, "metric": "weighted_f1", "value": report.weighted_f1_pct},
                    {"study": "gamma", "setting": tag, "seed": self.config.seed, "metric": "responses", "value": float(len(events))}
                ]

        return rows

from typing import List

import argparse
import json
import logging
import sys

from pydantic import ValidationError

from watchtower.wt_config import Settings, apply_overrides, load_run_config
from watchtower.wt_errors import DataError, TrainingError, WatchtowerError
from watchtower.wt_pipeline import WT_Pipeline

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3


class UsageError(Exception):
    pass


class WT_ArgumentParser(argparse.ArgumentParser):

    ## argparse exits 2 on bad flags, which is the data-error code here
    def error(self, message: str) -> None:
        raise UsageError(message)


def build_parser() -> WT_ArgumentParser:

    parser = WT_ArgumentParser(prog = "watchtower", description = "Online video anomaly assistant: data, training, streaming runs, evaluation")
    parser.add_argument("--quiet", action = "store_true", help = "only log warnings and errors")

    common = WT_ArgumentParser(add_help = False)
    common.add_argument("--config", default = None, help = "RunConfig JSON file")
    common.add_argument("--out", default = None, help = "run directory (relative paths land under $WATCHTOWER_OUTPUT_ROOT)")
    common.add_argument("--seed", type = int, default = None)
    common.add_argument("--depth", type = int, default = None, help = "distiller depth")
    common.add_argument("--w", type = float, default = None, help = "EOS loss weight")
    common.add_argument("--set", action = "append", default = [], metavar = "PATH=VALUE", help = "override any config field (repeatable)")

    sub = parser.add_subparsers(dest = "command", required = True, parser_class = WT_ArgumentParser)
    sub.add_parser("gen-data", parents = [common], help = "generate the synthetic dataset and split manifest")
    sub.add_parser("distill", parents = [common], help = "stage 1: fit the distiller to the offline teacher")

    train = sub.add_parser("train", parents = [common], help = "stage 2: base LM (cached) then LoRA fine-tuning")
    train.add_argument("--no-strd", action = "store_true", help = "train without a distiller (baseline)")

    run = sub.add_parser("run", parents = [common], help = "stream the test split and log responses")
    run.add_argument("--mode", choices = ["VAP", "VAD", "VAA"], required = True)
    run.add_argument("--gamma", type = float, default = None)
    run.add_argument("--stream", action = "append", default = None, help = "stream id (repeatable), default all test streams")

    ev = sub.add_parser("eval", parents = [common], help = "score an event log")
    ev.add_argument("--mode", choices = ["VAP", "VAD", "VAA"], required = True)
    ev.add_argument("--events", default = None, help = "event log, default the run directory's")
    ev.add_argument("--dataset", default = None, help = "dataset JSONL, default the run directory's")
    ev.add_argument("--trace", default = None, help = "eos trace CSV")

    ablate = sub.add_parser("ablate", parents = [common], help = "ablation grids")
    ablate.add_argument("--study", choices = ["strd", "depth", "gamma"], required = True)

    bench = sub.add_parser("bench", parents = [common], help = "latency and throughput vs cache length")
    bench.add_argument("--pairs", type = int, default = None)

    return parser


def make_pipeline(args: argparse.Namespace) -> WT_Pipeline:

    overrides = list(args.set)
    if args.out is not None:
        overrides.append(f"out={json.dumps(args.out)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.depth is not None:
        overrides.append(f"distill.depth={args.depth}")
    if args.w is not None:
        overrides.append(f"finetune.w={args.w}")

    config = apply_overrides(load_run_config(args.config), overrides)
    if args.quiet:
        config = apply_overrides(config, ["distill.verbose=false", "pretrain.verbose=false", "finetune.verbose=false"])

    return WT_Pipeline(config = config, settings = Settings(), verbose = not args.quiet)


def dispatch(args: argparse.Namespace) -> None:

    pipeline = make_pipeline(args)
    command = args.command

    if command == "gen-data":
        pipeline.gen_data()
    elif command == "distill":
        pipeline.distill()
    elif command == "train":
        pipeline.train(no_strd = args.no_strd)
    elif command == "run":
        pipeline.run(args.mode, gamma = args.gamma, stream_ids = args.stream)
    elif command == "eval":
        report = pipeline.evaluate(args.mode, events_path = args.events, dataset_path = args.dataset, trace_path = args.trace)
        print(report.json(exclude = {"per_category"}, sort_keys = True))
    elif command == "ablate":
        pipeline.ablate(args.study)
    elif command == "bench":
        print(pipeline.bench(args.pairs).to_string(index = False))

    return None


def main(argv: List[str] | None = None) -> int:

    '''
        Exit codes: 0 ok, 1 usage, 2 data error, 3 training divergence.
        Failures print exactly one diagnostic line on stderr.
    '''

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, f"usage: {e}")

    logging.basicConfig(
        level = logging.WARNING if args.quiet else logging.INFO,
        format = "%(asctime)s %(levelname)s %(name)s: %(message)s"
    )

    try:
        dispatch(args)
    except TrainingError as e:
        return _fail(EXIT_TRAINING, str(e))
    except (DataError, FileNotFoundError) as e:
        return _fail(EXIT_DATA, str(e))
    except (UsageError, ValidationError, WatchtowerError) as e:
        return _fail(EXIT_USAGE, str(e))

    return EXIT_OK


def _fail(code: int, message: str) -> int:

    print(f"watchtower: {' '.join(message.split())}", file = sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

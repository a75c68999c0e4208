"""``e2bows`` command line: one subcommand per action in ``actions.get_actions()``.

Exit codes: 0 on success, 1 when an action fails (bad input, unreadable
file), 2 on usage errors.
"""
import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from e2bows import validators
from e2bows.actions import get_actions
from e2bows.config import configure_logging, load_config, resolve_config_path
from e2bows.datasets import CIFAR_VARIANTS
from e2bows.errors import E2BowsError

GLOBAL_FLAGS = ("command", "config", "verbose")

log = logging.getLogger(__name__)


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--m", type=validators.positive_int, help="visual words per SFM")
    sub.add_argument("--rho-hat", type=validators.open_unit_interval, help="target fraction of nonzero words")
    sub.add_argument("--alpha", type=validators.positive_float, help="triplet margin")
    sub.add_argument("--lambda1", type=validators.non_negative_float, help="triplet loss weight")
    sub.add_argument("--lambda2", type=validators.non_negative_float, help="sparsity loss weight")
    sub.add_argument("--lr", type=validators.positive_float, help="weight learning rate")
    sub.add_argument("--beta-lr", type=validators.positive_float, help="threshold learning rate")
    sub.add_argument("--epochs", type=validators.non_negative_int)
    sub.add_argument("--batch", type=validators.positive_int)
    sub.add_argument("--seed", type=validators.non_negative_int)
    sub.add_argument("--beta-init", type=validators.non_negative_float)
    sub.add_argument("--freeze-backbone", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="e2bows", description="Learned sparse visual words for image retrieval.")
    parser.add_argument("--config", help="ini file with [app:main] settings (default: $E2BOWS_CONFIG)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")

    sub = commands.add_parser("gen-data", help="generate a synthetic dataset")
    sub.add_argument("--out", required=True)
    sub.add_argument("--classes", type=validators.positive_int)
    sub.add_argument("--per-class", type=validators.positive_int)
    sub.add_argument("--size", type=validators.positive_int)
    sub.add_argument("--sigma", type=validators.non_negative_float)
    sub.add_argument("--seed", type=validators.non_negative_int)
    sub.add_argument("--labels-per-image", type=validators.positive_int)
    sub.add_argument("--id-offset", type=validators.non_negative_int)
    sub.add_argument("--jitter", type=validators.unit_interval, help="blob shift as a fraction of half the image side")

    sub = commands.add_parser("import-cifar", help="convert a CIFAR binary batch to a dataset file")
    sub.add_argument("--input", dest="path", required=True)
    sub.add_argument("--variant", choices=sorted(CIFAR_VARIANTS), default="cifar10")
    sub.add_argument("--out", required=True)

    sub = commands.add_parser("features", help="dump backbone feature maps")
    sub.add_argument("--data", required=True)
    sub.add_argument("--ckpt")
    sub.add_argument("--seed", type=validators.non_negative_int)
    sub.add_argument("--batch", type=validators.positive_int)
    sub.add_argument("--out", required=True)

    sub = commands.add_parser("train", help="train backbone, classifier and bag-of-words layer")
    sub.add_argument("--data", required=True)
    sub.add_argument("--tree")
    sub.add_argument("--features", help="train the head on precomputed feature maps")
    sub.add_argument("--out", required=True)
    _add_train_flags(sub)

    sub = commands.add_parser("extract", help="write sparse visual words of a dataset")
    sub.add_argument("--ckpt", required=True)
    source = sub.add_mutually_exclusive_group(required=True)
    source.add_argument("--data")
    source.add_argument("--features")
    sub.add_argument("--out", required=True)
    sub.add_argument("--binarize", action="store_true")
    sub.add_argument("--beta-override", type=validators.non_negative_float)

    sub = commands.add_parser("build-index", help="build an inverted index from a words file")
    sub.add_argument("--words", required=True)
    sub.add_argument("--dim", type=validators.positive_int)
    sub.add_argument("--out", required=True)

    sub = commands.add_parser("query", help="rank indexed images for every query vector")
    sub.add_argument("--index", required=True)
    sub.add_argument("--words", required=True)
    sub.add_argument("--k", type=validators.positive_int)
    sub.add_argument("--out", required=True)

    sub = commands.add_parser("eval", help="score rankings with mAP and NDCG@k")
    sub.add_argument("--ranks", required=True)
    sub.add_argument("--labels", required=True)
    sub.add_argument("--query-labels")
    sub.add_argument("--ndcg-k", type=validators.positive_int)
    sub.add_argument("--out", required=True)

    sub = commands.add_parser("stats", help="print ANV, ANI and ANO of an index")
    sub.add_argument("--index", required=True)
    sub.add_argument("--code-bits", type=validators.positive_int)

    sub = commands.add_parser("export-sfm", help="write the SFMs of one image as graymaps")
    sub.add_argument("--ckpt", required=True)
    source = sub.add_mutually_exclusive_group(required=True)
    source.add_argument("--data")
    source.add_argument("--features")
    sub.add_argument("--image", type=validators.non_negative_int, required=True)
    sub.add_argument("--out", required=True)

    sub = commands.add_parser("sweep", help="retrieval cost and accuracy over word thresholds")
    sub.add_argument("--ckpt", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--queries")
    sub.add_argument("--features")
    sub.add_argument("--query-features")
    sub.add_argument("--betas", type=validators.float_list, help="comma separated thresholds")
    sub.add_argument("--k", type=validators.positive_int)
    sub.add_argument("--ndcg-k", type=validators.positive_int)
    sub.add_argument("--out", required=True)
    return parser


def _print_result(command: str, result: Dict[str, Any]) -> None:
    if command == "stats":
        line = f"images={result['image_count']} ANV={result['anv']:.6g} ANI={result['ani']:.6g} ANO={result['ano']:.6g}"
        if "linear_scan_ops" in result:
            line += f" linear_scan_ops={result['linear_scan_ops']}"
        print(line)
    elif command == "sweep":
        print(result["table"].to_string(index=False))
    elif command == "eval":
        print(f"mAP={result['map']:.6f} NDCG={result['ndcg']:.6f}")
    elif "path" in result:
        print(result["path"])


def run_command(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (None, 0) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    try:
        config_path = resolve_config_path(args.config)
        configure_logging(config_path, args.verbose)
        context = {"config": load_config(config_path)}
        data_dict = {key: value for key, value in vars(args).items() if key not in GLOBAL_FLAGS and value is not None}
        result = get_actions()[args.command](context, data_dict)
    except (E2BowsError, OSError) as e:
        log.error(f"{args.command} failed: {e}")
        return 1
    _print_result(args.command, result)
    return 0


def main() -> None:
    sys.exit(run_command())

##############################################################################
# cli.py
# The `bimamba` command: synth, project, train, eval, delong, bench, gradcheck
##############################################################################
import argparse
import logging
import os
import pathlib
import sys
from typing import List, Optional, Sequence

import numpy
import torch

from bimamba import bench, data, metrics, ops, utils
from bimamba._exceptions import (
    BiMambaError,
    ConfigError,
    ContractError,
    NonFiniteError,
    NumericalFailure,
    ParseError,
)
from bimamba._version import __version__
from bimamba.config import describe_keys, load_config
from bimamba.io_formats import read_volume, write_pgm
from bimamba.model import BiMambaModel, Fusion, ViewName, bce_loss
from bimamba.serialization import load_model
from bimamba.train import evaluate, train_loop

__all__ = ["main", "build_parser"]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

RESOLVED_CONFIG_NAME = "config.conf"
GRADCHECK_TOLERANCE = 1e-3
GRADCHECK_STEP = 1e-4

FUSION_CHOICES = (
    Fusion.INPUT_PATCH_CONCAT.value,
    Fusion.CLS_TOKEN_CONCAT.value,
    f"single_{ViewName.FRONTAL.value}",
    f"single_{ViewName.LATERAL.value}",
)


class _UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for data
    # errors here.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}"
        ) from None


def _str_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _read_column(path: pathlib.Path, integer: bool = False) -> numpy.ndarray:
    """One number per line; blank lines are skipped."""
    values = []
    offset = 0
    with open(path, "rb") as f:
        for line in f:
            text = line.decode("utf-8", errors="replace").strip()
            if text:
                try:
                    values.append(int(text) if integer else float(text))
                except ValueError:
                    expected = "an integer" if integer else "a number"
                    raise ParseError(
                        f"{path}: expected {expected} per line, got {text!r}",
                        offset=offset,
                    ) from None
            offset += len(line)
    return numpy.array(values)


def _write_column(path: pathlib.Path, values: Sequence) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(f"{v!r}\n" for v in values)


def cmd_synth(args) -> int:
    out: pathlib.Path = args.out
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ContractError(
            f"Output directory {out} is not empty; pass --force to"
            " overwrite its contents"
        )
    config = data.SynthConfig(height=args.size, width=args.size)
    samples, manifest = data.synth_dataset(args.seed, args.n, config)
    data.save_dataset(out, samples, manifest)
    print(
        f"wrote {len(samples)} subjects to {out}: {len(manifest.train)}"
        f" train, {len(manifest.val)} val, {len(manifest.test)} test"
    )
    if args.calibrate:
        report = data.calibration_report(samples, config)
        print(
            f"frontal_mean_auroc={report.frontal_mean_auroc:.4f}"
            f" lateral_mean_auroc={report.lateral_mean_auroc:.4f}"
            f" oracle_auroc={report.oracle_auroc:.4f}"
        )
    return EXIT_OK


def cmd_project(args) -> int:
    volume = read_volume(args.volume)
    write_pgm(
        args.out_frontal,
        data.parallel_project(volume, data.ProjectionAxis.FRONTAL),
    )
    write_pgm(
        args.out_lateral,
        data.parallel_project(volume, data.ProjectionAxis.LATERAL),
    )
    logger.info(
        f"Projected volume {volume.shape} to {args.out_frontal} and"
        f" {args.out_lateral}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = list(args.override) + [f"seed={args.seed}"]
    if args.data is not None:
        overrides.append(f"data_dir={args.data}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    config = load_config(args.config, overrides)
    if not config.data_dir or not config.out_dir:
        raise ConfigError(
            "train needs a dataset and an output directory"
            " (--data/--out or data_dir/out_dir in the config)"
        )
    logger.info("Resolved config:\n" + config.dump())
    os.makedirs(config.out_dir, exist_ok=True)
    with open(
        os.path.join(config.out_dir, RESOLVED_CONFIG_NAME),
        "w",
        encoding="utf-8",
    ) as f:
        f.write(config.dump())

    samples, manifest = data.load_dataset(config.data_dir)
    model = BiMambaModel(config.model, seed=config.train.seed)
    result = train_loop(
        model,
        manifest.select(samples, "train"),
        manifest.select(samples, "val"),
        config.train,
        config.out_dir,
    )
    best = load_model(result.checkpoint_path, config.model)
    test_samples = manifest.select(samples, "test")
    test_auroc = (
        evaluate(best, test_samples, config.train.eval_batch_size).auroc
        if test_samples
        else float("nan")
    )
    print(
        f"best_epoch={result.best_epoch}"
        f" val_auroc={result.best_val_auroc:.6f}"
        f" test_auroc={test_auroc:.6f}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    if args.fusion is not None and args.fusion != model.config.mode:
        raise ContractError(
            f"Checkpoint was trained as {model.config.mode!r}; cannot"
            f" evaluate it as {args.fusion!r}"
        )
    samples, manifest = data.load_dataset(args.data)
    selected = manifest.select(samples, args.split)
    if not selected:
        raise ContractError(f"Split {args.split!r} of {args.data} is empty")
    result = evaluate(model, selected, args.batch_size)
    if args.scores_out is not None:
        _write_column(args.scores_out, [float(s) for s in result.scores])
    if args.labels_out is not None:
        _write_column(args.labels_out, [int(v) for v in result.labels])
    print(
        f"mode={model.config.mode} split={args.split} n={len(selected)}"
        f" auroc={result.auroc:.6f}"
    )
    return EXIT_OK


def cmd_delong(args) -> int:
    scores_a = _read_column(args.scores_a)
    scores_b = _read_column(args.scores_b)
    labels = _read_column(args.labels, integer=True)
    if not len(scores_a) == len(scores_b) == len(labels):
        raise ContractError(
            f"Score and label files differ in length: {len(scores_a)},"
            f" {len(scores_b)} and {len(labels)} values"
        )
    result = metrics.delong_test(scores_a, scores_b, labels)
    print(
        f"auc_a={result.auc_a:.6f} auc_b={result.auc_b:.6f}"
        f" z={result.z:.6f} p={result.p_value:.6g}"
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    config = bench.BenchConfig(
        d_model=args.d_model,
        d_inner=args.d_inner,
        d_state=args.d_state,
        heads=args.heads,
        repeats=args.repeats,
        warmup=args.warmup,
        seed=args.seed,
    )
    if args.resolutions:
        lengths = bench.resolution_lengths(
            args.resolutions, args.patch_size, args.views
        )
    else:
        lengths = args.lengths
    known = [k.value for k in bench.Kernel]
    unknown = [k for k in args.kernels if k not in known]
    if unknown:
        raise ConfigError(
            f"Unknown kernels {unknown}, expected a subset of {known}"
        )
    kernels = [bench.Kernel(k) for k in args.kernels]
    records = bench.sweep(kernels, lengths, config)
    csv_text, summary = bench.report(records)
    if args.csv is not None:
        with open(args.csv, "w", encoding="utf-8", newline="") as f:
            f.write(csv_text)
    else:
        sys.stdout.write(csv_text)
    sys.stdout.write(summary)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = load_config(args.config, args.override)
    model_config = config.model.replace(dtype="float64")
    model = BiMambaModel(model_config, seed=args.seed)
    generator = torch.Generator().manual_seed(args.seed)
    with torch.no_grad():
        # Output projections start at zero, which would hide the scan
        # parameters' gradients
        for block in model.blocks:
            bound = block.out_proj.shape[0] ** -0.5
            noise = torch.rand(
                block.out_proj.shape, generator=generator, dtype=torch.float64
            )
            block.out_proj.copy_((noise * 2 - 1) * bound)
    shape = (args.batch, model_config.image_height, model_config.image_width)
    frontal = torch.rand(shape, generator=generator, dtype=torch.float64)
    lateral = torch.rand(shape, generator=generator, dtype=torch.float64)
    labels = torch.arange(args.batch, dtype=torch.float64) % 2

    def loss_fn() -> torch.Tensor:
        return bce_loss(model(frontal, lateral), labels)

    result = ops.gradient_check(
        loss_fn, list(model.named_parameters()), args.step
    )
    for name, error in result.errors:
        logger.debug(f"{name}: {error:.3e}")
    passed = result.passed(args.tolerance)
    print(
        f"max_relative_error={result.max_relative_error:.3e}"
        f" worst={result.worst_tensor}"
        f" tensors={len(result.errors)}"
        f" {'pass' if passed else 'FAIL'}"
    )
    return EXIT_OK if passed else EXIT_NUMERICAL


def _add_config_args(parser: argparse.ArgumentParser, default=None) -> None:
    parser.add_argument(
        "-c",
        "--config",
        default=default,
        metavar="PRESET_OR_FILE",
        help=(
            "a preset name (toy, desk, paper) or a key = value config file"
            f" (default: {default or 'built-in defaults'})"
        ),
    )
    parser.add_argument(
        "-o",
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key; may be repeated",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="bimamba",
        description=(
            "bidirectional selective state-space models for two-view"
            " radiograph classification"
        ),
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log at DEBUG level"
    )
    commands = parser.add_subparsers(
        dest="command", metavar="COMMAND", parser_class=_ArgumentParser
    )
    commands.required = True

    synth = commands.add_parser(
        "synth", help="generate the planted-signal two-view dataset"
    )
    synth.add_argument("--seed", type=int, required=True)
    synth.add_argument(
        "--n", type=int, default=1000, help="number of subjects"
    )
    synth.add_argument("--out", type=pathlib.Path, required=True)
    synth.add_argument(
        "--size", type=int, default=64, help="image height and width"
    )
    synth.add_argument(
        "--force",
        action="store_true",
        help="write into a non-empty output directory",
    )
    synth.add_argument(
        "--calibrate",
        action="store_true",
        help="print single-view and oracle AUROCs of the generated data",
    )
    synth.set_defaults(func=cmd_synth)

    project = commands.add_parser(
        "project", help="project a RAWV volume to frontal and lateral PGMs"
    )
    project.add_argument("--volume", type=pathlib.Path, required=True)
    project.add_argument("--out-frontal", type=pathlib.Path, required=True)
    project.add_argument("--out-lateral", type=pathlib.Path, required=True)
    project.set_defaults(func=cmd_project)

    train = commands.add_parser(
        "train",
        help="train a model on a dataset directory",
        epilog=describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    train.add_argument("--data", type=pathlib.Path, default=None)
    train.add_argument("--out", type=pathlib.Path, default=None)
    train.add_argument("--seed", type=int, required=True)
    _add_config_args(train)
    train.set_defaults(func=cmd_train)

    evaluate_ = commands.add_parser(
        "eval", help="score a dataset split with a checkpoint"
    )
    evaluate_.add_argument("--checkpoint", type=pathlib.Path, required=True)
    evaluate_.add_argument("--data", type=pathlib.Path, required=True)
    evaluate_.add_argument(
        "--split", choices=data.SPLITS, default="test", help="(default: test)"
    )
    evaluate_.add_argument(
        "--fusion",
        choices=FUSION_CHOICES,
        default=None,
        help="require the checkpoint to have been trained in this mode",
    )
    evaluate_.add_argument("--batch-size", type=int, default=64)
    evaluate_.add_argument(
        "--scores-out",
        type=pathlib.Path,
        default=None,
        help="write one probability per line",
    )
    evaluate_.add_argument(
        "--labels-out",
        type=pathlib.Path,
        default=None,
        help="write the matching 0/1 labels, one per line",
    )
    evaluate_.set_defaults(func=cmd_eval)

    delong = commands.add_parser(
        "delong", help="compare two score files with DeLong's test"
    )
    delong.add_argument("scores_a", type=pathlib.Path)
    delong.add_argument("scores_b", type=pathlib.Path)
    delong.add_argument("labels", type=pathlib.Path)
    delong.set_defaults(func=cmd_delong)

    bench_ = commands.add_parser(
        "bench", help="time and size the blocks across sequence lengths"
    )
    bench_.add_argument("--seed", type=int, required=True)
    bench_.add_argument(
        "--kernels",
        type=_str_list,
        default=[
            bench.Kernel.BIMAMBA_BLOCK.value,
            bench.Kernel.ATTN_BLOCK.value,
        ],
        help=(
            "comma-separated subset of "
            + ",".join(k.value for k in bench.Kernel)
        ),
    )
    bench_.add_argument(
        "--lengths",
        type=_int_list,
        default=list(bench.DEFAULT_LENGTHS),
        help="comma-separated sequence lengths",
    )
    bench_.add_argument(
        "--resolutions",
        type=_int_list,
        default=None,
        help="comma-separated image sizes; replaces --lengths",
    )
    bench_.add_argument("--patch-size", type=int, default=16)
    bench_.add_argument(
        "--views", choices=("single", "multi"), default="multi"
    )
    bench_.add_argument("--d-model", type=int, default=384)
    bench_.add_argument("--d-inner", type=int, default=768)
    bench_.add_argument("--d-state", type=int, default=16)
    bench_.add_argument(
        "--heads", type=int, default=0, help="0 picks a default for d-model"
    )
    bench_.add_argument("--repeats", type=int, default=9)
    bench_.add_argument("--warmup", type=int, default=2)
    bench_.add_argument(
        "--csv",
        type=pathlib.Path,
        default=None,
        help="write the CSV here instead of standard output",
    )
    bench_.set_defaults(func=cmd_bench)

    gradcheck = commands.add_parser(
        "gradcheck",
        help="compare end-to-end gradients with finite differences",
    )
    _add_config_args(gradcheck, default="toy")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--batch", type=int, default=2)
    gradcheck.add_argument("--step", type=float, default=GRADCHECK_STEP)
    gradcheck.add_argument(
        "--tolerance", type=float, default=GRADCHECK_TOLERANCE
    )
    gradcheck.set_defaults(func=cmd_gradcheck)
    return parser


def _exit_code(error: BaseException) -> int:
    if isinstance(error, (NonFiniteError, NumericalFailure)):
        return EXIT_NUMERICAL
    if isinstance(error, ConfigError):
        return EXIT_USAGE
    return EXIT_DATA


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logger.debug(f"bimamba {__version__}; {utils.get_mem_usage()}")
    try:
        return args.func(args)
    except (BiMambaError, OSError) as e:
        kind = type(e).__name__
        message = str(e).replace("\n", " ")
        if isinstance(e, OSError) and e.filename is not None:
            message = f"{e.strerror}: {e.filename}"
        print(f"error: {kind}: {message}", file=sys.stderr)
        logger.debug("Traceback:", exc_info=True)
        return _exit_code(e)


"""``tfk`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
error (non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .attention import effective_window, recording, wmsa_flops
from .backbone import ConfigError
from .core.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core.rng import Rng
from .core.tensor import NumericError, Tensor, backward_fault, no_grad, set_precision
from .data import DataError, Dataset, SpecError, generate_synthetic, load_manifest, write_manifest
from .export import entropy_profile, export_records
from .metrics import compute_metrics, confusion, emit_report
from .model import build_model, count_parameters
from .schema import SchemaError
from .training import predict, train
from .verify import format_table, gradient_suite

log = logging.getLogger("tfk")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.tfk"


def _jsonable(flat: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in flat.items()}


def _unjson(flat: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in flat.items()}


def load_dataset(run: cfgmod.RunConfig) -> tuple[Dataset, dict | None]:
    """Dataset named by ``data.source`` and, for synthetic data, its Bayes report."""
    size = run.model.backbone.image_size
    if run.data.source == "synthetic":
        try:
            return generate_synthetic(run.data.synthetic_spec(size))
        except SpecError as exc:
            raise ConfigError(str(exc)) from None
    return Dataset.from_cases(load_manifest(run.data.source, size)), None


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _report(model, data: Dataset, split: str, out: Path, batch: int) -> float:
    part = data.subset(split)
    preds = predict(model, part, batch)
    report = compute_metrics(confusion(preds, part.labels, part.schema))
    emit_report(report, out / "metrics")
    return report.avg


def _model_from_checkpoint(path):
    try:
        state, flat, extra = load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    run = cfgmod.from_flat(_unjson(flat))
    set_precision(run.precision)
    model = build_model(run.model, Rng(run.seed))
    model.load_state_dict(state)
    return run, model, extra


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    run = cfgmod.load_config(args.config, args.set)
    out = Path(args.out_dir)
    cfgmod.echo(run, out)
    set_precision(run.precision)
    data, bayes = load_dataset(run)
    log.info("dataset: %s", data.split_counts())
    if bayes is not None:
        _write_csv(out / "bayes_report.csv", ["observed", "accuracy"], [[k, f"{v:.4f}"] for k, v in bayes.items()])
    model = build_model(run.model, Rng(run.seed))
    result = train(model, data, run.train, Rng(run.seed).split("train"), log_path=out / "train_log.csv")
    save_checkpoint(out / CHECKPOINT_NAME, model.state_dict(), _jsonable(run.to_flat()),
                    {"best_epoch": result.best_epoch, "best_val_avg": result.best_val_avg})
    avg = _report(model, data, "test", out, run.train.eval_batch_size)
    print(f"best epoch {result.best_epoch}  val avg {result.best_val_avg:.4f}  test avg {avg:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run, model, _ = _model_from_checkpoint(args.checkpoint)
    out = Path(args.out_dir)
    cfgmod.echo(run, out)
    data, _ = load_dataset(run)
    avg = _report(model, data, args.split, out, run.train.eval_batch_size)
    print(f"{args.split} avg {avg:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run = cfgmod.load_config(args.config, args.set)
    out = Path(args.out_dir)
    cfgmod.echo(run, out)
    with contextlib.ExitStack() as stack:
        for op in args.fault or []:
            stack.enter_context(backward_fault(op))
        rows = gradient_suite(seed=run.seed, config=run.model)
    table = format_table(rows)
    (out / "gradcheck.csv").write_text(table + "\n")
    print(table)
    failed = [r.name for r in rows if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    run = cfgmod.load_config(args.config, args.set)
    out = Path(args.out_dir)
    cfgmod.echo(run, out)
    if run.data.source != "synthetic":
        raise ConfigError("synth needs data.source = synthetic")
    data, bayes = load_dataset(run)
    path = write_manifest(data, out)
    _write_csv(out / "bayes_report.csv", ["observed", "accuracy"], [[k, f"{v:.4f}"] for k, v in bayes.items()])
    print(f"wrote {len(data)} cases to {path}")
    return EXIT_OK


def cmd_export_attn(args) -> int:
    run, model, _ = _model_from_checkpoint(args.checkpoint)
    out = Path(args.out_dir)
    cfgmod.echo(run, out)
    data, _ = load_dataset(run)
    case = data.case(data.find(args.case_id))
    with no_grad(), recording() as records:
        model(Tensor(case.derm_image) if run.model.use_derm else None,
              Tensor(case.cli_image) if run.model.use_cli else None,
              Tensor(case.meta) if run.model.use_meta else None)
    paths = export_records(records, out)
    profile = entropy_profile(records)
    _write_csv(out / "entropy_profile.csv", ["record", "entropy_variance"],
               [[k, f"{v:.6f}"] for k, v in profile.items()])
    print(f"exported {len(paths)} attention record sets for case {args.case_id}")
    return EXIT_OK


def flops_rows(run: cfgmod.RunConfig) -> list[list]:
    b = run.model.backbone
    rows = []
    for i in range(4):
        h, w = b.stage_resolution(i)
        m, _ = effective_window(h, w, b.window)
        per_block = wmsa_flops(h, w, b.stage_channels(i), m)
        rows.append([i + 1, h, w, b.stage_channels(i), m, b.stage_depths[i], per_block, per_block * b.stage_depths[i]])
    return rows


def cmd_flops(args) -> int:
    run = cfgmod.load_config(args.config, args.set)
    out = Path(args.out_dir)
    cfgmod.echo(run, out)
    rows = flops_rows(run)
    rows.append(["total", "", "", "", "", sum(r[5] for r in rows), "", sum(r[7] for r in rows)])
    header = ["stage", "height", "width", "channels", "window", "blocks", "flops_per_block", "flops"]
    _write_csv(out / "flops.csv", header, rows)
    print((out / "flops.csv").read_text(), end="")
    return EXIT_OK


def cmd_params(args) -> int:
    run = cfgmod.load_config(args.config, args.set)
    out = Path(args.out_dir)
    cfgmod.echo(run, out)
    counts = count_parameters(build_model(run.model, Rng(run.seed)))
    _write_csv(out / "params.csv", ["group", "parameters"], list(counts.items()))
    print((out / "params.csv").read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tfk", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat section.key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out-dir", default="tfk-out", help="directory for every output file")

    sp = sub.add_parser("train", help="train, keep the best-validation checkpoint, report test metrics")
    common(sp)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("gradcheck", help="finite-difference check of every module")
    common(sp)
    sp.add_argument("--fault", action="append", metavar="OP",
                    help="corrupt the backward pass of a primitive (negative control)")
    sp.set_defaults(func=cmd_gradcheck)
    sp = sub.add_parser("synth", help="write a synthetic dataset as PNGs plus manifest")
    common(sp)
    sp.set_defaults(func=cmd_synth)
    sp = sub.add_parser("export-attn", help="export HMT/MTP attention maps for one case")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--case-id", required=True)
    sp.set_defaults(func=cmd_export_attn)
    sp = sub.add_parser("flops", help="window attention multiply counts per stage")
    common(sp)
    sp.set_defaults(func=cmd_flops)
    sp = sub.add_parser("params", help="parameter counts per module group")
    common(sp)
    sp.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

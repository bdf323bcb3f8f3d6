"""Command-line entry point: ``svsl train | compare | early-exit | report``.

Exit codes: 0 success, 2 configuration error, 3 training aborted,
4 analysis error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config, parse_config, with_seed
from .metrics import early_exit_eval, forward_cost_fraction
from .model import load_params, save_params
from .numerics import ContractError
from .records import (
    MetricsFormatError,
    build_summary,
    dump_json,
    format_metrics_csv,
    load_means,
    load_run,
    save_means,
)
from .training import TrainingAborted, compare_runs, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_ANALYSIS = 0, 2, 3, 4

log = logging.getLogger("svsl")


class AnalysisError(RuntimeError):
    pass


def cmd_train(config_path, out=None, seed=None, verbose=False) -> int:
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = with_seed(cfg, seed)
        train, test = cfg.load_datasets()
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(out if out is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = f"# svsl {__version__}\n" + cfg.to_ini()
    (out_dir / "config.echo").write_text(echo)
    try:
        result = run_experiment(cfg.train, cfg.model, train, test, progress=verbose)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    (out_dir / "metrics.csv").write_text(format_metrics_csv(result))
    extra = {"seed": cfg.train.seed, "loss_mode": cfg.train.loss_mode,
             "widths": result.params.widths, "num_layers": result.params.num_layers}
    (out_dir / "summary.json").write_text(dump_json(build_summary(result, extra)))
    save_params(result.params, out_dir / "params_eot.bin")
    if result.it_params is not None:
        save_params(result.it_params, out_dir / "params_it.bin")
    save_means(result.means, out_dir / "means_eot.npz")
    eot = result.eot
    print(f"it_epoch={result.it_epoch} eot_train_acc={eot.train_accuracy:.4f} "
          f"eot_test_acc={eot.test_accuracy:.4f} -> {out_dir}")
    return EXIT_OK


def comparison_table(run_a, run_b) -> list[list[str]]:
    """Rows of (metric, run_a, run_b, delta, delta_def)."""
    a, b = load_run(run_a), load_run(run_b)
    try:
        cmp = compare_runs(a, b)
    except ContractError as exc:
        raise AnalysisError(str(exc)) from None

    def s(x):
        return "" if x is None else repr(x) if isinstance(x, float) else str(x)

    rows = [
        ["it_epoch", s(cmp.it_epoch[0]), s(cmp.it_epoch[1]), "", ""],
        ["it_test_accuracy", s(cmp.it_test_accuracy[0]), s(cmp.it_test_accuracy[1]), "", ""],
        ["eot_test_accuracy", s(cmp.eot_test_accuracy[0]), s(cmp.eot_test_accuracy[1]),
         s(cmp.eot_test_accuracy_delta), "b-a"],
        ["best_test_accuracy", s(cmp.best_test_accuracy[0]), s(cmp.best_test_accuracy[1]),
         s(cmp.best_test_accuracy_delta), "b-a"],
        ["best_test_epoch", s(cmp.best_test_epoch[0]), s(cmp.best_test_epoch[1]), "", ""],
        ["best_test_in_tpt", s(cmp.best_in_tpt[0]), s(cmp.best_in_tpt[1]), "", ""],
    ]
    for split, delta in (("train", cmp.lambda_train_delta), ("test", cmp.lambda_test_delta)):
        for j in cmp.layers:
            va = getattr(a.eot, f"lambda_{split}")[j]
            vb = getattr(b.eot, f"lambda_{split}")[j]
            rows.append([f"eot_lambda_{split}_L{j}", s(va), s(vb), s(delta[j]), "a-b"])
    return rows


def cmd_compare(run_a, run_b, out=None) -> int:
    try:
        rows = comparison_table(run_a, run_b)
    except (AnalysisError, MetricsFormatError, KeyError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    header = ["metric", "run_a", "run_b", "delta", "delta_def"]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header] + rows)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    text = f"a = {run_a}\nb = {run_b}\n" + "".join(
        "  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() + "\n" for r in [header] + rows)
    out_dir = Path(out) if out is not None else Path(run_b)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "comparison.csv").write_text(buf.getvalue())
    (out_dir / "comparison.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def early_exit_report(run_dir, layer: int, split: str = "test") -> dict:
    run_dir = Path(run_dir)
    try:
        cfg = parse_config((run_dir / "config.echo").read_text(), Path("."), str(run_dir / "config.echo"))
        params = load_params(run_dir / "params_eot.bin")
        means = load_means(run_dir / "means_eot.npz")
    except (OSError, ValueError) as exc:
        raise AnalysisError(f"run {run_dir} is incomplete: {exc}") from None
    k = params.num_layers
    if not 1 <= layer <= k:
        raise AnalysisError(f"layer {layer} outside 1..{k}")
    train, test = cfg.load_datasets()
    ds = train if split == "train" else test
    res = early_exit_eval(params, ds, means, layer)
    return {"layer": layer, "split": split, "n": res.n, "ncc_accuracy": res.ncc_accuracy,
            "agreement": res.agreement_with_classifier,
            "cost_fraction": forward_cost_fraction(params.widths, layer)}


def cmd_early_exit(run_dir, layer: int, split: str = "test") -> int:
    try:
        rep = early_exit_report(run_dir, layer, split)
    except (AnalysisError, ContractError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    for key in ("layer", "split", "n", "ncc_accuracy", "agreement", "cost_fraction"):
        print(f"{key}: {rep[key]!r}" if isinstance(rep[key], float) else f"{key}: {rep[key]}")
    return EXIT_OK


def report_files(run_dir) -> dict[str, str]:
    run = load_run(run_dir)
    out = {}
    for split in ("train", "test"):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "layer", "lambda"])
        for r in run.records:
            lam = r.lambda_train if split == "train" else r.lambda_test
            for j in sorted(lam):
                w.writerow([r.epoch, j, repr(lam[j])])
        out[f"lambda_{split}.csv"] = buf.getvalue()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "layer", "variability"])
    for r in run.records:
        for j in sorted(r.variability):
            w.writerow([r.epoch, j, repr(r.variability[j])])
    out["variability.csv"] = buf.getvalue()
    out["it_marker.csv"] = "it_epoch\n" + ("" if run.it_epoch is None else str(run.it_epoch)) + "\n"
    return out


def cmd_report(run_dir, out=None) -> int:
    try:
        files = report_files(run_dir)
    except (MetricsFormatError, KeyError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    out_dir = Path(out) if out is not None else Path(run_dir) / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out_dir / name).write_text(text)
    print(f"wrote {', '.join(sorted(files))} to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svsl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"svsl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides output.dir)")
    t.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    t.add_argument("-v", "--verbose", action="store_true")

    c = sub.add_parser("compare", help="compare two finished runs (a = vanilla, b = svsl)")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("--out", help="where to write comparison.csv/.txt (default: run_b)")

    e = sub.add_parser("early-exit", help="nearest-class-mean classification at an intermediate layer")
    e.add_argument("run_dir")
    e.add_argument("--layer", type=int, required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")

    r = sub.add_parser("report", help="emit plot-ready mismatch tables")
    r.add_argument("run_dir")
    r.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    if args.command == "train":
        return cmd_train(args.config, args.out, args.seed, args.verbose)
    if args.command == "compare":
        return cmd_compare(args.run_a, args.run_b, args.out)
    if args.command == "early-exit":
        return cmd_early_exit(args.run_dir, args.layer, args.split)
    return cmd_report(args.run_dir, args.out)


if __name__ == "__main__":
    sys.exit(main())

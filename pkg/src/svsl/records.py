"""metrics.csv / summary.json writers and readers for a run directory."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .metrics import ClassMeans
from .training import EpochRecord, RunResult


def metrics_header(k: int) -> list[str]:
    return (["epoch", "split", "accuracy", "ce_loss", "svsl_loss", "in_tpt"]
            + [f"lambda_L{j}" for j in range(1, k + 1)]
            + [f"var_L{j}" for j in range(1, k + 1)])


def _f(x: Optional[float]) -> str:
    # repr round-trips float64 exactly
    return "" if x is None else repr(float(x))


def metrics_rows(result: RunResult) -> list[list[str]]:
    layers = result.layers
    rows = []
    for r in result.records:
        tpt = "1" if r.in_tpt else "0"
        rows.append([str(r.epoch), "train", _f(r.train_accuracy), _f(r.ce_loss), _f(r.svsl_loss), tpt]
                    + [_f(r.lambda_train[j]) for j in layers] + [_f(r.variability[j]) for j in layers])
        rows.append([str(r.epoch), "test", _f(r.test_accuracy), _f(r.test_ce_loss), "", tpt]
                    + [_f(r.lambda_test[j]) for j in layers] + ["" for _ in layers])
    return rows


def format_metrics_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header(len(result.layers)))
    w.writerows(metrics_rows(result))
    return buf.getvalue()


class MetricsFormatError(ValueError):
    pass


def read_metrics_csv(path) -> list[EpochRecord]:
    """Inverse of ``format_metrics_csv``; train and test rows are merged per epoch."""
    path = Path(path)
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise MetricsFormatError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise MetricsFormatError(f"{path}: empty file")
    header = rows[0]
    n_layer_cols = len(header) - 6
    if n_layer_cols <= 0 or n_layer_cols % 2 or header != metrics_header(n_layer_cols // 2):
        raise MetricsFormatError(f"{path}: unexpected header {header}")
    k = n_layer_cols // 2
    pending: dict[int, dict] = {}
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise MetricsFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            epoch = int(row[0])
            acc, ce = float(row[2]), float(row[3])
            svsl = float(row[4]) if row[4] else None
            lam = {j: float(row[5 + j]) for j in range(1, k + 1)}
            var = {j: float(row[5 + k + j]) for j in range(1, k + 1)} if row[6 + k] else None
        except ValueError as exc:
            raise MetricsFormatError(f"{path}:{lineno}: {exc}") from None
        split = row[1]
        if split == "train":
            pending[epoch] = dict(acc=acc, ce=ce, svsl=svsl, lam=lam, var=var, tpt=row[5] == "1")
        elif split == "test":
            tr = pending.pop(epoch, None)
            if tr is None:
                raise MetricsFormatError(f"{path}:{lineno}: test row for epoch {epoch} without train row")
            records.append(EpochRecord(epoch, tr["acc"], acc, tr["ce"], tr["svsl"], ce,
                                       tr["lam"], lam, tr["var"], tr["tpt"]))
        else:
            raise MetricsFormatError(f"{path}:{lineno}: unknown split {split!r}")
    if pending:
        raise MetricsFormatError(f"{path}: epochs {sorted(pending)} lack a test row")
    if not records:
        raise MetricsFormatError(f"{path}: no records")
    return records


def build_summary(result: RunResult, extra: Optional[dict] = None) -> dict:
    eot, best = result.eot, result.best_test
    it = result.record_at(result.it_epoch) if result.it_epoch is not None else None

    def point(r: Optional[EpochRecord]):
        if r is None:
            return None
        return {"epoch": r.epoch, "train_accuracy": r.train_accuracy, "test_accuracy": r.test_accuracy,
                "ce_loss": r.ce_loss, "svsl_loss": r.svsl_loss, "in_tpt": r.in_tpt}

    table = []
    for j in result.layers:
        table.append({
            "layer": j,
            "train_it": None if it is None else it.lambda_train[j],
            "train_eot": eot.lambda_train[j],
            "test_it": None if it is None else it.lambda_test[j],
            "test_eot": eot.lambda_test[j],
        })
    summary = {
        "tool": f"svsl {__version__}",
        "it_epoch": result.it_epoch,
        "eot_epoch": result.eot_epoch,
        "probe_epochs": [r.epoch for r in result.records],
        "it": point(it),
        "eot": point(eot),
        "best_test": {"epoch": best.epoch, "test_accuracy": best.test_accuracy, "in_tpt": best.in_tpt},
        "lambda_it_eot": table,
    }
    if extra:
        summary.update(extra)
    return summary


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_run(run_dir) -> RunResult:
    """Records and IT/EOT epochs of a finished run (parameters are not loaded)."""
    run_dir = Path(run_dir)
    records = read_metrics_csv(run_dir / "metrics.csv")
    try:
        summary = json.loads((run_dir / "summary.json").read_text())
    except (OSError, ValueError) as exc:
        raise MetricsFormatError(f"cannot read {run_dir / 'summary.json'}: {exc}") from None
    return RunResult(records, summary["it_epoch"], summary["eot_epoch"], None)


def save_means(means: ClassMeans, path) -> None:
    np.savez(path, counts=means.counts, **{f"layer_{j}": m for j, m in means.means.items()})


def load_means(path) -> ClassMeans:
    with np.load(path) as z:
        means = {int(name.split("_")[1]): z[name] for name in z.files if name.startswith("layer_")}
        return ClassMeans(means, z["counts"], "train")

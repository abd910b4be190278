"""Metrics CSV and summary JSON writers with a versioned column set."""

from __future__ import annotations

import csv
import io
import json
import math

METRICS_SCHEMA = "aqsgd-metrics/1"
SUMMARY_SCHEMA = "aqsgd-summary/1"
_BASE_HEAD = ("step", "epoch", "sample_id", "loss", "grad_norm", "delta_norm_total")
_BASE_TAIL = ("bytes_fw", "bytes_bw", "first_visit")
_ANALYSIS = ("delta_q_norm", "delta_tilde_norm")


class SchemaError(ValueError):
    pass


def metrics_columns(K: int, analysis: bool = False) -> list[str]:
    cols = list(_BASE_HEAD) + [f"delta_norm_b{i}" for i in range(K - 1)] + list(_BASE_TAIL)
    if analysis:
        cols += list(_ANALYSIS)
    return cols


def _num(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def metrics_csv(metrics, K: int, analysis: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_columns(K, analysis))
    for m in metrics:
        row = [m.step, m.epoch, m.sample_id, m.loss, m.grad_norm, m.delta_norm_total, *m.delta_norms,
               m.bytes_fw, m.bytes_bw, m.first_visit]
        if analysis:
            row += [m.delta_q_norm, m.delta_tilde_norm]
        w.writerow([_num(v) for v in row])
    return buf.getvalue()


def check_metrics_header(text: str, K: int, analysis: bool = False) -> None:
    header = next(csv.reader(io.StringIO(text)), [])
    expected = metrics_columns(K, analysis)
    if header != expected:
        raise SchemaError(f"metrics columns {header} differ from {METRICS_SCHEMA} columns {expected}")


def summary(result, spec) -> dict:
    return {
        "schema": SUMMARY_SCHEMA,
        "metrics_schema": METRICS_SCHEMA,
        "mode": spec.mode,
        "stages": spec.stages,
        "seed": spec.seed,
        "lr": result.lr,
        "steps": len(result.metrics),
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss if math.isfinite(result.final_loss) else None,
        "diverged": result.diverged,
        "total_bytes_fw": sum(m.bytes_fw for m in result.metrics),
        "total_bytes_bw": sum(m.bytes_bw for m in result.metrics),
    }


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"

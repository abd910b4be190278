"""Glue between a :class:`RunSpec` and the protocol, worker and analysis layers."""

from __future__ import annotations

from .analysis import (
    audit_lemma1,
    audit_lemma2_theorem1,
    empirical_constants,
    stability_trend,
    toy_box_check,
    with_cq,
    TooFewEpochsError,
)
from .config import RunSpec
from .constants import CERTIFIED, EMPIRICAL, NoCertificateError, TheoremConstants
from .model import exact_constants
from .numerics import RngStream
from .protocol import ConfigError, RunResult, run_training
from .quantize import certified_cq, empirical_cq
from .workers import run_workers

_CQ_STREAM = 11


def run_cq(spec: RunSpec, dims) -> tuple[float, str]:
    """Worst relative-error constant over both directions and all boundary dims."""
    specs = [spec.fw_spec(), spec.bw_spec()] if spec.mode != "fp32" else []
    try:
        return max([certified_cq(s, d) for s in specs for d in dims], default=0.0), CERTIFIED
    except NoCertificateError:
        rng = RngStream(spec.seed, _CQ_STREAM)
        return max(empirical_cq(s, d, rng) for s in specs for d in dims), EMPIRICAL


def constants_for(spec: RunSpec, model, data, toy, iterates) -> TheoremConstants:
    cq, prov = run_cq(spec, model.boundary_dims)
    if toy is not None:
        return with_cq(exact_constants(toy, data), cq, prov)
    return empirical_constants(model, data, iterates, cq, seed=spec.seed)


def execute(spec: RunSpec, *, analysis: bool | None = None, record_trajectory: bool = False) -> tuple:
    """Run a spec. Returns ``(result, model, data, toy)``."""
    model, data, toy = spec.build()
    params = spec.initial_params(model, toy)
    analysis = spec.analysis if analysis is None else analysis
    constants = constants_for(spec, model, data, toy, [params]) if spec.lr == "theorem" else None
    cfg = spec.train_config()
    if spec.execution == "workers":
        if analysis:
            raise ConfigError("analysis needs reference execution")
        result = run_workers(model, data, cfg, params, constants=constants)
    else:
        result = run_training(model, data, cfg, params, constants=constants, analysis=analysis,
                              record_trajectory=record_trajectory)
    return result, model, data, toy


def audit_run(spec: RunSpec) -> tuple[RunResult, dict]:
    """Run with analysis on and audit every bound that applies."""
    spec = spec.with_(execution="reference", analysis=True)
    result, model, data, toy = execute(spec, record_trajectory=True)
    traj = result.trajectory or []
    picks = traj[:: max(1, len(traj) // 10)][:10] or [result.params]
    constants = constants_for(spec, model, data, toy, picks)
    reports = {}
    box = toy_box_check(toy, data) if toy is not None else None
    reports["lemma1"] = audit_lemma1(result.breakdowns, constants, box)
    if result.metrics and not result.diverged:
        f_star = toy.optimum(data) if toy is not None else None
        reports["lemma2_theorem1"] = audit_lemma2_theorem1(result, constants, f_star=f_star)
    try:
        reports["trend"] = {"audit": "trend", "pass": None, **stability_trend(result.metrics)}
    except TooFewEpochsError as e:
        reports["trend"] = {"audit": "trend", "pass": None, "skipped": str(e)}
    result.trajectory = None
    return result, reports

"""Self-check suites run by ``aqsgd verify SUITE``.

Every suite returns a :class:`SuiteReport` of named checks; a suite fails
when any hard check fails. Sizes default to the acceptance sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import (
    ErrorBreakdown,
    audit_lemma1,
    audit_lemma2_theorem1,
    stability_trend,
    toy_box_check,
    visit_decay_ratios,
    with_cq,
)
from .constants import CERTIFIED
from .model import ToyLQ, exact_constants, make_dataset, mlp_model, sgd_train
from .numerics import RngStream
from .protocol import AQSGD, DIRECTQ, FP32, ZERO_INIT, TrainConfig, run_training, sample_schedule
from .quantize import IDENTITY, certified_cq, l2_spec, range_spec, rounding_profile, roundtrip_rows
from .reporting import check_metrics_header, metrics_csv
from .workers import run_workers
from . import simnet

SUITES = ("quantizer", "oracle", "lemma1", "lemma2", "trend", "kstage", "simnet")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteReport:
    suite: str
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, passed, detail=""):
        self.checks.append(Check(name, bool(passed), detail))

    def lines(self) -> list[str]:
        return [f"[{'PASS' if c.passed else 'FAIL'}] {self.suite}/{c.name}: {c.detail}" for c in self.checks]


# ----------------------------------------------------------------- quantizer

def unbiasedness_violations(spec, x, draws: int, rng: RngStream, roundtrip=roundtrip_rows) -> tuple[int, float]:
    """Coordinates whose Monte Carlo mean error exceeds 4 exact standard errors.

    The standard error uses the exact stochastic-rounding variance
    ``spacing**2 p (1-p)``; a floor of 8 ulps of the scale absorbs decode
    rounding on coordinates that sit on a level.
    """
    E = roundtrip(spec, np.tile(x, (draws, 1)), rng) - x
    mu = E.mean(axis=0)
    spacing, p = rounding_profile(spec, x)
    se = spacing * np.sqrt(p * (1.0 - p) / draws)
    tol = np.maximum(4.0 * se, 8.0 * np.finfo(float).eps * float(np.max(np.abs(x))))
    return int(np.sum(np.abs(mu) > tol)), float(np.max(np.abs(mu) / tol))


def l2_bound_violations(pairs: int, seed: int = 0) -> tuple[int, float]:
    """Draws with ``||x - Q(x)|| > sqrt(d)/2^b ||x||`` over mixed (d, b)."""
    rng = RngStream(seed, 60)
    bad, worst = 0, 0.0
    combos = [(16, 4), (32, 4), (8, 2), (64, 6), (4, 1)]
    per = pairs // len(combos)
    for d, b in combos:
        spec = l2_spec(b)
        X = rng.normal((per, d)) * np.exp(rng.normal((per, 1)))
        Q = roundtrip_rows(spec, X, rng)
        ratio = np.linalg.norm(X - Q, axis=1) / (certified_cq(spec, d) * np.linalg.norm(X, axis=1))
        bad += int(np.sum(ratio > 1.0))
        worst = max(worst, float(ratio.max()))
    return bad, worst


def suite_quantizer(draws: int = 100_000, vectors: int = 20, roundtrip=roundtrip_rows) -> SuiteReport:
    rep = SuiteReport("quantizer")
    xs = RngStream(0, 50).normal((vectors, 32))
    for make in (l2_spec, range_spec):
        for b in (2, 4, 8):
            spec = make(b)
            bad, worst = 0, 0.0
            for i, x in enumerate(xs):
                v, w = unbiasedness_violations(spec, x, draws, RngStream(0, 100 + i), roundtrip)
                bad += v
                worst = max(worst, w)
            rep.add(f"unbiased_{spec}", bad == 0, f"{bad} coordinates outside 4 SE (worst {worst:.3f} of tolerance)")
    bad, worst = l2_bound_violations(10_000)
    rep.add("l2_deterministic_bound", bad == 0, f"{bad} violations in 10000 draws (max ratio {worst:.4f})")
    x = xs[0]
    rep.add("identity_bitwise", np.array_equal(roundtrip(IDENTITY, x[None, :], RngStream(0, 1))[0], x))
    z = np.zeros((1, 32))
    rep.add("zero_vector", all(np.array_equal(roundtrip(s, z, RngStream(0, 1)), z) for s in (l2_spec(4), range_spec(4))))
    return rep


def biased_roundtrip(spec, X, rng):
    """Test double that always rounds toward the lower level (biased)."""
    Q = roundtrip_rows(spec, X, rng)
    spacing, p = rounding_profile(spec, X[0])
    return Q - spacing * (Q > X) * (p > 0)


# -------------------------------------------------------------------- oracle

def identity_oracle(K: int, steps: int = 1000, seed: int = 0) -> bool:
    data = make_dataset("regression-mlp", 256, 1)
    model = mlp_model(8, 2, K)
    cfg = TrainConfig(mode=AQSGD, K=K, fw=IDENTITY, bw=IDENTITY, lr=0.05, steps=steps, seed=seed)
    res = run_training(model, data, cfg, record_trajectory=True)
    schedule = [s for _, _, s in sample_schedule(cfg, data.N)]
    ref = []
    sgd_train(model, data, model.init_params(seed), schedule, 0.05, ref)
    return len(ref) == len(res.trajectory) and all(
        all(np.array_equal(a, b) for a, b in zip(p, q)) for p, q in zip(ref, res.trajectory)
    )


def metric_fields(m) -> tuple:
    """The measured values of a step (excludes the buffer-only first-visit flag)."""
    return (m.step, m.epoch, m.sample_id, m.loss, m.grad_norm, m.delta_norms, m.bytes_fw, m.bytes_bw)


def suite_oracle() -> SuiteReport:
    rep = SuiteReport("oracle")
    for K in (2, 4):
        rep.add(f"identity_equals_sgd_K{K}", identity_oracle(K), "1000 steps, bitwise")
    data = make_dataset("regression-mlp", 64, 1)
    model = mlp_model(8, 2, 2)
    fp = run_training(model, data, TrainConfig(mode=FP32, K=2, epochs=2))
    aq = run_training(model, data, TrainConfig(mode=AQSGD, K=2, fw=IDENTITY, bw=IDENTITY, epochs=2))
    rep.add("fp32_equals_identity_aqsgd", [metric_fields(m) for m in fp.metrics] == [metric_fields(m) for m in aq.metrics])
    cfg = TrainConfig(mode=AQSGD, K=2, fw=range_spec(4), bw=range_spec(8), epochs=2)
    a, b = run_training(model, data, cfg), run_workers(model, data, cfg)
    rep.add("workers_equal_reference", all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
            and metrics_csv(a.metrics, 2) == metrics_csv(b.metrics, 2))
    try:
        check_metrics_header(metrics_csv(a.metrics, 2), 2)
        rep.add("metrics_csv_schema", True, "columns match the versioned schema")
    except ValueError as e:
        rep.add("metrics_csv_schema", False, str(e))
    return rep


# ------------------------------------------------------------------- lemmas

def toy_setup(N: int = 16, bits: int = 4, seed: int = 0):
    toy = ToyLQ()
    data = make_dataset("toy-lq", N, seed)
    spec = l2_spec(bits)
    cq = certified_cq(spec, toy.h)
    constants = with_cq(exact_constants(toy, data), cq, CERTIFIED)
    return toy, data, spec, constants


def toy_run(steps: int = 10_000, seed: int = 0, N: int = 16):
    toy, data, spec, constants = toy_setup(N, seed=seed)
    cfg = TrainConfig(mode=AQSGD, K=2, fw=spec, bw=spec, lr="theorem", steps=steps, seed=seed)
    res = run_training(toy.model(), data, cfg, toy.init_params(seed), constants=constants, analysis=True)
    return toy, data, constants, res


def suite_lemma1(steps: int = 10_000) -> SuiteReport:
    rep = SuiteReport("lemma1")
    toy, data, constants, res = toy_run(steps)
    audit = audit_lemma1(res.breakdowns, constants, toy_box_check(toy, data))
    for e in audit["inequalities"]:
        rep.add(e["name"], e["pass"], f"{e['violations']} violations over {e['steps']} steps, max ratio {e['max_ratio']:.3g}")
    rep.add("inside_certified_box", audit["out_of_box_steps"] == 0, f"{audit['out_of_box_steps']} steps outside")
    worst = max(b.reconstruction_error() for b in res.breakdowns)
    rep.add("decomposition_exact", worst <= 1e-10, f"max coordinate mismatch {worst:.3g}")
    # negative control: zero message error with nonzero gradient error must be flagged
    z = [np.zeros(4)]
    fake = ErrorBreakdown(0, 0, delta=z, delta_q=[np.zeros(16), np.zeros(4)],
                          delta_tilde=[np.ones(16), np.zeros(4)], g_exact=[np.zeros(16), np.zeros(4)], messages=z)
    neg = audit_lemma1([fake], constants)
    rep.add("auditor_flags_violation", not neg["pass"], "fabricated delta=0 with nonzero error")
    return rep


def suite_lemma2(steps: int = 10_000, seeds=(0, 1, 2)) -> SuiteReport:
    rep = SuiteReport("lemma2")
    for s in seeds:
        toy, data, constants, res = toy_run(steps, seed=s)
        audit = audit_lemma2_theorem1(res, constants, f_star=toy.optimum(data))
        e, thm = audit["inequalities"]
        rep.add(f"message_error_seed{s}", e["pass"] and e["gamma_admissible"],
                f"lhs {e['lhs']:.3g} <= rhs {e['rhs']:.3g} (ratio {e['ratio']:.3g})")
        rep.add(f"convergence_ratio_seed{s}", True, f"reported, not asserted: {thm['ratio']:.3g}")
    return rep


# -------------------------------------------------------------------- trend

def frozen_decay(seed: int = 0, visits: int = 12, bits: int = 4):
    """Max per-visit message-error ratio with frozen parameters, and c_Q."""
    data = make_dataset("regression-mlp", 32, 1)
    model = mlp_model(8, 2, 2)
    spec = l2_spec(bits)
    cfg = TrainConfig(mode=AQSGD, K=2, fw=spec, bw=spec, lr=0.0, epochs=visits, seed=seed, warmup=ZERO_INIT)
    res = run_training(model, data, cfg)
    ratios = visit_decay_ratios(res.metrics)
    return max(ratios), certified_cq(spec, model.boundary_dims[0]), len(ratios)


def suite_trend(seeds=(0, 1, 2)) -> SuiteReport:
    rep = SuiteReport("trend")
    data = make_dataset("regression-mlp", 256, 1)
    for s in seeds:
        cfg = TrainConfig(mode=AQSGD, K=2, fw=range_spec(4), bw=range_spec(8), epochs=10, seed=s)
        res = run_training(mlp_model(8, 2, 2), data, cfg)
        tr = stability_trend(res.metrics)
        rep.add(f"delta_shrinks_seed{s}", tr["last_below_second"],
                f"epoch2 {tr['mean_delta'][1]:.4g} -> last {tr['mean_delta'][-1]:.4g}, sign-test p {tr['sign_test_p']:.3g}")
    worst, cq, n = frozen_decay()
    rep.add("frozen_geometric_decay", worst <= cq, f"max ratio {worst:.4f} <= c_Q {cq:.4f} over {n} visits")
    return rep


# ------------------------------------------------------------------- kstage

def first_visit_and_mirror(N: int = 256, epochs: int = 5, K: int = 4, seed: int = 0) -> dict:
    data = make_dataset("regression-mlp", N, 1)
    model = mlp_model(8, 2, K)
    cfg = TrainConfig(mode=AQSGD, K=K, fw=range_spec(2), bw=range_spec(4), epochs=epochs, seed=seed)
    out = {}
    for name, runner in (("reference", run_training), ("workers", run_workers)):
        res = runner(model, data, cfg)
        seen, exact = set(), True
        for m in res.metrics:
            if m.sample_id not in seen:
                seen.add(m.sample_id)
                exact &= all(d == 0.0 for d in m.delta_norms)
        out[name] = (exact and len(seen) == N, res)
    return out


def suite_kstage() -> SuiteReport:
    rep = SuiteReport("kstage")
    out = first_visit_and_mirror()
    rep.add("first_visit_exact_reference", out["reference"][0])
    # run_workers raises on any digest mismatch, so finishing means every step matched
    rep.add("first_visit_exact_workers_and_mirrored", out["workers"][0], "digests compared after every step")
    ref, wrk = out["reference"][1], out["workers"][1]
    rep.add("workers_match_reference", all(np.array_equal(a, b) for a, b in zip(ref.params, wrk.params)))
    data = make_dataset("regression-mlp", 256, 1)
    finals = {}
    for mode in (AQSGD, DIRECTQ):
        for K in (2, 4):
            cfg = TrainConfig(mode=mode, K=K, fw=range_spec(2), bw=range_spec(4), epochs=10)
            finals[mode, K] = run_training(mlp_model(8, 2, K), data, cfg).final_loss
    rep.add("aqsgd_beats_directq_K4", finals[AQSGD, 4] <= finals[DIRECTQ, 4],
            f"{finals[AQSGD, 4]:.4g} vs {finals[DIRECTQ, 4]:.4g}")
    rep.add("directq_degrades_with_K", finals[DIRECTQ, 4] > finals[DIRECTQ, 2],
            f"K=2 {finals[DIRECTQ, 2]:.4g} -> K=4 {finals[DIRECTQ, 4]:.4g}")
    return rep


# ------------------------------------------------------------------- simnet

def simnet_monotone(p, grid) -> tuple[bool, bool]:
    bw_ok, size_ok = True, True
    comps = [simnet.Compression(simnet.AQSGD, b, b) for b in (2, 3, 4, 6, 8, 12, 16)] + [simnet.Compression()]
    prev = None
    for c in comps:
        tp = [simnet.throughput(p, simnet.LinkSpec(bw), c) for bw in grid]
        bw_ok &= all(b >= a for a, b in zip(tp, tp[1:]))
        if prev is not None:
            size_ok &= all(b <= a for a, b in zip(prev, tp))
        prev = tp
    return bw_ok, size_ok


def suite_simnet() -> SuiteReport:
    rep = SuiteReport("simnet")
    p = simnet.preset("gpt2xl-8stage")
    bands = simnet.ratio_bands(p)
    rep.add("raw32_ratio", bands["raw32_ratio"] >= 5.0, f"{bands['raw32_ratio']:.3f}x slowdown")
    rep.add("compressed_drop", bands["compressed_drop"] <= 0.25, f"{100 * bands['compressed_drop']:.1f}% drop")
    grid = simnet.bandwidth_grid()
    bw_ok, size_ok = simnet_monotone(p, grid)
    rep.add("monotone_in_bandwidth", bw_ok, f"{len(grid)}-point sweep")
    rep.add("monotone_in_payload", size_ok)
    fast = [simnet.throughput(p, simnet.LinkSpec(bw), simnet.Compression(simnet.AQSGD, 4, 4)) for bw in grid]
    raw = [simnet.throughput(p, simnet.LinkSpec(bw), simnet.Compression()) for bw in grid]
    rep.add("compression_dominates", all(a >= b for a, b in zip(fast, raw)))
    return rep


RUNNERS = {
    "quantizer": suite_quantizer,
    "oracle": suite_oracle,
    "lemma1": suite_lemma1,
    "lemma2": suite_lemma2,
    "trend": suite_trend,
    "kstage": suite_kstage,
    "simnet": suite_simnet,
}


def run_suite(name: str) -> SuiteReport:
    if name not in RUNNERS:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return RUNNERS[name]()

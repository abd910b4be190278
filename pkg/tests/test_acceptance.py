"""The twelve acceptance criteria, one test each, at their stated tolerances.

Every test prints one ``criterion N: PASS|FAIL`` line, which is also
repeated in the pytest terminal summary.
"""

import math
import time

import numpy as np
import pytest

from aqsgd import simnet
from aqsgd.analysis import (
    audit_lemma1,
    audit_lemma2_theorem1,
    compute_theorem_constants,
    stability_trend,
    toy_box_check,
)
from aqsgd.constants import InadmissibleQuantizerError, TheoremConstants
from aqsgd.model import DenseLinear, DenseTanh, Diagonal, SquaredLoss, Stage, make_dataset, mlp_model
from aqsgd.numerics import RngStream, finite_diff_grad
from aqsgd.protocol import AQSGD, DIRECTQ, FP32, TrainConfig, run_training
from aqsgd.quantize import l2_spec, range_spec
from aqsgd.verify import (
    first_visit_and_mirror,
    frozen_decay,
    identity_oracle,
    l2_bound_violations,
    simnet_monotone,
    toy_run,
    unbiasedness_violations,
)

from conftest import ACCEPTANCE_LINES

SEEDS = (0, 1, 2)


def report(n: int, ok: bool, detail: str):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def reg256():
    return make_dataset("regression-mlp", 256, 1)


@pytest.fixture(scope="module")
def finals(reg256):
    """Final losses and metrics of the criterion-8 grid, 10 epochs, 3 seeds."""
    grid = {
        ("fp32", 2): dict(mode=FP32),
        ("fp32", 4): dict(mode=FP32),
        ("aq48", 2): dict(mode=AQSGD, fw=range_spec(4), bw=range_spec(8)),
        ("aq48", 4): dict(mode=AQSGD, fw=range_spec(4), bw=range_spec(8)),
        ("aq24", 2): dict(mode=AQSGD, fw=range_spec(2), bw=range_spec(4)),
        ("aq24", 4): dict(mode=AQSGD, fw=range_spec(2), bw=range_spec(4)),
        ("dq24", 2): dict(mode=DIRECTQ, fw=range_spec(2), bw=range_spec(4)),
        ("dq24", 4): dict(mode=DIRECTQ, fw=range_spec(2), bw=range_spec(4)),
    }
    t0 = time.perf_counter()
    out = {}
    for (name, K), kw in grid.items():
        out[name, K] = [
            run_training(mlp_model(8, 2, K), reg256, TrainConfig(K=K, epochs=10, seed=s, **kw)) for s in SEEDS
        ]
    out["seconds"] = time.perf_counter() - t0
    return out


def _mean(runs):
    return float(np.mean([r.final_loss for r in runs]))


def test_criterion_01_identity_oracle():
    t0 = time.perf_counter()
    ok = {K: identity_oracle(K, steps=1000) for K in (2, 4)}
    dt = time.perf_counter() - t0
    report(1, all(ok.values()) and dt < 10, f"bitwise equal to SGD for 1000 steps, K=2: {ok[2]}, K=4: {ok[4]} ({dt:.1f}s)")


def test_criterion_02_unbiasedness():
    t0 = time.perf_counter()
    xs = RngStream(0, 50).normal((20, 32))
    bad, worst = 0, 0.0
    for make in (l2_spec, range_spec):
        for b in (2, 4, 8):
            for i, x in enumerate(xs):
                v, w = unbiasedness_violations(make(b), x, 100_000, RngStream(0, 100 + i))
                bad += v
                worst = max(worst, w)
    dt = time.perf_counter() - t0
    report(2, bad == 0 and dt < 30,
           f"{bad} of 3840 coordinates outside 4 SE, worst at {worst:.2f} of tolerance ({dt:.1f}s)")


def test_criterion_03_deterministic_cq_bound():
    bad, worst = l2_bound_violations(10_000)
    report(3, bad == 0, f"{bad} violations over 10^4 (x, draw) pairs, max ||x-Q(x)||/(c_Q||x||) = {worst:.4f}")


def test_criterion_04_first_visit_and_mirroring():
    out = first_visit_and_mirror(N=256, epochs=5, K=4)
    ok_ref, ok_wrk = out["reference"][0], out["workers"][0]
    report(4, ok_ref and ok_wrk, f"first delta exactly 0 for all 256 samples (reference {ok_ref}, workers {ok_wrk}); "
                                 f"buffer digests matched after all {len(out['workers'][1].metrics)} steps")


def test_criterion_05_lemma1_certified():
    t0 = time.perf_counter()
    toy, data, constants, res = toy_run(steps=10_000)
    rep = audit_lemma1(res.breakdowns, constants, toy_box_check(toy, data))
    dt = time.perf_counter() - t0
    q, t = rep["inequalities"]
    ok = rep["hard"] and rep["pass"] and q["steps"] == t["steps"] == 10_000 and dt < 120
    report(5, ok, f"violations {q['violations']} + {t['violations']} over {q['steps']} steps, "
                  f"max ratios {q['max_ratio']:.3g} / {t['max_ratio']:.3g}, "
                  f"{rep['out_of_box_steps']} steps outside box ({dt:.1f}s)")


def test_criterion_06_lemma2_aggregate():
    parts, ok = [], True
    for s in SEEDS:
        toy, data, constants, res = toy_run(steps=10_000, seed=s)
        assert constants.c_Q <= 0.25
        rep = audit_lemma2_theorem1(res, constants, f_star=toy.optimum(data))
        e = rep["inequalities"][0]
        ok &= rep["hard"] and e["pass"] and e["gamma_admissible"] and len(res.metrics) == 10_000
        parts.append(f"seed {s} ratio {e['ratio']:.3g}")
    report(6, ok, "lhs <= rhs at gamma_theorem, T=10^4, c_Q=0.125: " + ", ".join(parts))


def test_criterion_07_constants_arithmetic():
    base = dict(L_f=1.0, ell_a=(1.0,), C_a=(1.0,), L_down=(1.0,), C_down=(1.0,), sigma=0.0, N=10)
    c = compute_theorem_constants(TheoremConstants(c_Q=0.1, **base), T=100)
    expected = 4 * 0.1 * 1 * 2 * 1 * 10 / math.sqrt(0.98)
    ok_c = abs(c.C - expected) <= 1e-12 * expected and round(c.C, 4) == 8.0812
    try:
        compute_theorem_constants(TheoremConstants(c_Q=0.8, **base), T=100)
        ok_reject = False
    except InadmissibleQuantizerError:
        ok_reject = True
    z = compute_theorem_constants(TheoremConstants(c_Q=0.0, **{**base, "L_f": 3.0}), T=100)
    ok_zero = z.C == 0 and z.C_prime == 0 and abs(z.gamma - 1 / (9 * 3.0 * 10)) <= 1e-12 * z.gamma
    report(7, ok_c and ok_reject and ok_zero,
           f"C = {c.C:.6f} (expected {expected:.6f}), c_Q=0.8 rejected: {ok_reject}, c_Q=0 limit: {ok_zero}")


def test_criterion_08_convergence_quality(finals):
    fp2, fp4 = _mean(finals["fp32", 2]), _mean(finals["fp32", 4])
    aq48 = _mean(finals["aq48", 2])
    aq24, dq24 = _mean(finals["aq24", 2]), _mean(finals["dq24", 2])
    aq24_4, dq24_4, aq48_4 = _mean(finals["aq24", 4]), _mean(finals["dq24", 4]), _mean(finals["aq48", 4])
    checks = {
        "fw4/bw8 within 5% of fp32": abs(aq48 - fp2) <= 0.05 * fp2,
        "aqsgd fw2 <= directq fw2": aq24 <= dq24,
        "directq fw2 degrades at K=4": dq24_4 > dq24,
        "aqsgd K=4 within 10% of fp32": abs(aq24_4 - fp4) <= 0.10 * fp4 and abs(aq48_4 - fp4) <= 0.10 * fp4,
        "runtime < 5 min": finals["seconds"] < 300,
    }
    detail = (f"fp32 {fp2:.5f}, aq fw4 {aq48:.5f} ({100 * (aq48 / fp2 - 1):+.1f}%), aq fw2 {aq24:.5f} <= dq fw2 "
              f"{dq24:.5f}; K=4: fp32 {fp4:.5f}, aq fw2 {aq24_4:.5f} ({100 * (aq24_4 / fp4 - 1):+.1f}%), "
              f"dq fw2 {dq24_4:.5f} ({finals['seconds']:.0f}s)")
    failed = [k for k, v in checks.items() if not v]
    report(8, not failed, detail + (f"; failed: {failed}" if failed else ""))


def test_criterion_09_self_enforcing_dynamics(finals):
    shrink, n = 0, 0
    for key in (("aq48", 2), ("aq48", 4), ("aq24", 2), ("aq24", 4)):
        for r in finals[key]:
            if r.diverged:
                continue
            n += 1
            shrink += bool(stability_trend(r.metrics)["last_below_second"])
    worst, cq, visits = frozen_decay()
    report(9, shrink == n == 12 and worst <= cq,
           f"last-epoch mean delta < epoch-2 mean in {shrink}/{n} converged runs; "
           f"frozen-parameter max per-visit ratio {worst:.4f} <= c_Q {cq:.4f} over {visits} visits")


def test_criterion_10_low_bit_buffer(reg256):
    parts, ok = [], True
    for s in SEEDS:
        losses = {}
        for z in (None, 8):
            cfg = TrainConfig(mode=AQSGD, K=2, fw=range_spec(4), bw=range_spec(8), buffer_bits=z, epochs=10, seed=s)
            losses[z] = run_training(mlp_model(8, 2, 2), reg256, cfg).final_loss
        rel = losses[8] / losses[None] - 1
        ok &= abs(rel) <= 0.10
        parts.append(f"seed {s} {100 * rel:+.2f}%")
    report(10, ok, "z=8 final loss vs z=full: " + ", ".join(parts))


def test_criterion_11_simnet_bands():
    p = simnet.preset("gpt2xl-8stage")
    bands = simnet.ratio_bands(p)
    grid = simnet.bandwidth_grid(1e7, 1e11, 100)
    bw_ok, size_ok = simnet_monotone(p, grid)
    ok = bands["raw32_ratio"] >= 5 and bands["compressed_drop"] <= 0.25 and bw_ok and size_ok
    report(11, ok, f"raw32 10Gbps/100Mbps ratio {bands['raw32_ratio']:.2f}x, 4-bit drop "
                   f"{100 * bands['compressed_drop']:.1f}%, monotone over 100 points: {bw_ok and size_ok}")


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def test_criterion_12_gradient_correctness():
    rng = RngStream(12, 0)
    kinds = {
        "dense_tanh": lambda: Stage((DenseTanh(6, 5),)),
        "dense_linear": lambda: Stage((DenseLinear(6, 4),)),
        "diagonal": lambda: Stage((Diagonal(5),)),
        "squared_loss_head": lambda: Stage((DenseTanh(5, 3), DenseLinear(3, 2)), SquaredLoss(2)),
    }
    worst = {}
    for name, make in kinds.items():
        w = 0.0
        for _ in range(100):
            st = make()
            p, x = rng.normal(st.n_params), rng.normal(st.n_in)
            if st.loss is None:
                u = rng.normal(st.n_out)
                gp, gx = st.backward(p, x, u)
                fp = finite_diff_grad(lambda q: float(u @ st.forward(q, x)), p)
                fx = finite_diff_grad(lambda z: float(u @ st.forward(p, z)), x)
            else:
                y = rng.normal(st.n_out)
                _, gp, gx = st.loss_and_grad(p, x, y)
                fp = finite_diff_grad(lambda q: st.loss_and_grad(q, x, y)[0], p)
                fx = finite_diff_grad(lambda z: st.loss_and_grad(p, z, y)[0], x)
            w = max(w, _rel(gp, fp), _rel(gx, fx))
        worst[name] = w
    report(12, all(v < 1e-6 for v in worst.values()),
           "max relative error over 100 instances: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))

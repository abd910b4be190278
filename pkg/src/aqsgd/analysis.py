"""Error decomposition, theorem constants and numeric audits of the bounds.

Quantities measured per step (all against a shadow pass with the same
parameters and no compression):

``delta[i]``
    exact boundary activation minus the message the next stage consumed.
``delta_q``
    applied gradient minus the exact backward pass evaluated at the messages,
    i.e. the error caused by quantizing backward gradients.
``delta_tilde``
    exact backward pass at the messages minus the exact per-sample gradient,
    i.e. the error caused by stale/compressed forward messages.

The applied gradient is therefore ``g_exact + delta_q + delta_tilde`` up to
floating-point rounding of the sums.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .constants import (
    CERTIFIED,
    EMPIRICAL,
    InadmissibleQuantizerError,
    TheoremConstants,
)
from .model import Dataset, PipelineModel, ToyLQ
from .numerics import RngStream, l2_norm
from .protocol import (
    PipelineState,
    RunResult,
    StepMetrics,
    TrainConfig,
    compressed_pass,
)

AUDIT_SCHEMA = "aqsgd-audit/1"
CQ_LIMIT = math.sqrt(0.5)
# Float tolerance for "lhs <= rhs": relative 1e-9 plus absolute 1e-12.
REL_TOL = 1e-9
ABS_TOL = 1e-12


class SnapshotMismatchError(RuntimeError):
    """Replaying a step from its snapshot did not reproduce the applied gradient."""


class MissingShadowGradientsError(ValueError):
    pass


class TooFewEpochsError(ValueError):
    pass


# ---------------------------------------------------------------- constants

def _concat_norm(vectors) -> float:
    return math.sqrt(sum(float(v @ v) for v in vectors))


def compute_theorem_constants(c: TheoremConstants, T: int | None = None) -> TheoremConstants:
    """Fill the derived constants and the step size ``1/(3(C+3L_f)sqrt(T))``.

    For K > 2, ``C_tilde`` and ``C_1`` follow the multi-stage bounds and the
    step-size constant ``C`` is taken as ``sqrt(2K * C_1 * C_prime)``.
    """
    if not c.c_Q < CQ_LIMIT:
        raise InadmissibleQuantizerError(f"c_Q={c.c_Q} is not below sqrt(1/2)")
    T = T if T is not None else c.T
    if T is None or T < 1:
        raise ValueError("T must be a positive integer")
    q2 = c.c_Q * c.c_Q
    denom = 1.0 - 2.0 * q2
    K, N = c.K, c.N
    if K == 2:
        (ell,), (Ca,), (L,), (Cd,) = _single(c.ell_a), _single(c.C_a), _single(c.L_down), _single(c.C_down)
        C = 4.0 * c.c_Q * ell * (1.0 + Ca) * L * N / math.sqrt(denom)
        C_prime = 18.0 * q2 * ell * ell * N * N / denom
        C_tilde = Ca * Cd
        C_1 = None
    else:
        _need(c, K)
        C_tilde = math.sqrt(sum((a * d) ** 2 for a, d in zip(c.C_a, c.C_down)))
        C_1 = multi_stage_C1(c)
        ell2 = sum(v * v for v in c.ell_a)
        C_prime = K * 36.0 * q2 * ell2 * N * N * C_1 / denom
        C = math.sqrt(2.0 * K * C_1 * C_prime)
    denom_g = 3.0 * (C + 3.0 * c.L_f) * math.sqrt(T)
    if denom_g == 0.0:
        raise ValueError("C + 3 L_f is zero; step size is unbounded")
    gamma = 1.0 / denom_g
    C_dprime = None
    if K == 2:
        C_dprime = (0.5 + 1.5 * gamma * c.L_f) * (1.0 + c.C_a[0]) ** 2 * c.L_down[0] ** 2
    return TheoremConstants(
        L_f=c.L_f, ell_a=c.ell_a, C_a=c.C_a, L_down=c.L_down, C_down=c.C_down, sigma=c.sigma,
        c_Q=c.c_Q, N=N, K=K, L_a_input=c.L_a_input, provenance=dict(c.provenance), T=T,
        C=C, C_prime=C_prime, C_dprime=C_dprime, C_tilde=C_tilde, C_1=C_1, gamma=gamma,
    )


def _single(v):
    if len(v) != 1:
        raise ValueError("two-stage constants take one entry per field")
    return v


def _need(c: TheoremConstants, K: int):
    if not (len(c.C_a) == len(c.L_down) == len(c.C_down) == K - 1):
        raise ValueError("C_a, L_down and C_down need one entry per boundary")
    if len(c.ell_a) != K:
        raise ValueError("ell_a needs one entry per stage for K > 2")
    if len(c.L_a_input) != K:
        raise ValueError("L_a_input needs one entry per stage for K > 2")


def multi_stage_C1(c: TheoremConstants) -> float:
    """Constant with ``||delta_tilde||^2 <= 2K * C_1 * ||delta||^2`` for K > 2."""
    K = c.K
    terms = [(1.0 + 2.0 * c.C_a[K - 2] ** 2) * c.L_down[K - 2] ** 2]
    for j in range(K - 2):
        terms.append(c.C_a[j] ** 2 * c.L_down[j] ** 2 + c.C_down[j + 1] ** 2 * c.L_a_input[j + 1] ** 2)
    return max(terms)


def with_cq(c: TheoremConstants, c_Q: float, provenance: str = CERTIFIED) -> TheoremConstants:
    prov = dict(c.provenance)
    prov["c_Q"] = provenance
    return TheoremConstants(
        L_f=c.L_f, ell_a=c.ell_a, C_a=c.C_a, L_down=c.L_down, C_down=c.C_down, sigma=c.sigma,
        c_Q=c_Q, N=c.N, K=c.K, L_a_input=c.L_a_input, provenance=prov,
    )


def lemma1_bounds(c: TheoremConstants) -> tuple[float, float]:
    """``(bound on ||delta_q||, factor f with ||delta_tilde|| <= f*||delta||)``."""
    if c.K == 2:
        return c.c_Q * c.C_a[0] * c.C_down[0], (1.0 + c.C_a[0]) * c.L_down[0]
    _need(c, c.K)
    C_tilde = math.sqrt(sum((a * d) ** 2 for a, d in zip(c.C_a, c.C_down)))
    return c.c_Q * C_tilde, math.sqrt(2.0 * c.K * multi_stage_C1(c))


# ------------------------------------------------------------ decomposition

@dataclass
class StepSnapshot:
    """Copies of one sample's buffer rows and of every quantizer stream."""

    buffers: list
    fw_rngs: list
    bw_rngs: list
    buf_rngs: list

    @classmethod
    def capture(cls, state: PipelineState, sid: int) -> "StepSnapshot":
        return cls(
            buffers=[b.restricted(sid) for b in state.buffers],
            fw_rngs=[r.clone() for r in state.fw_rngs],
            bw_rngs=[r.clone() for r in state.bw_rngs],
            buf_rngs=[r.clone() for r in state.buf_rngs],
        )


@dataclass
class ErrorBreakdown:
    step: int
    sample_id: int
    delta: list                 # per boundary
    delta_q: list               # per stage
    delta_tilde: list           # per stage
    g_exact: list               # per stage
    messages: list              # m_bar per boundary
    params: list | None = None  # parameters the step read
    applied: list | None = None  # actual parameter change
    lr: float | None = None

    @property
    def delta_norm(self) -> float:
        return _concat_norm(self.delta)

    @property
    def delta_q_norm(self) -> float:
        return _concat_norm(self.delta_q)

    @property
    def delta_tilde_norm(self) -> float:
        return _concat_norm(self.delta_tilde)

    def reconstructed_update(self, lr: float | None = None) -> list:
        lr = self.lr if lr is None else lr
        return [-lr * (g + q + t) for g, q, t in zip(self.g_exact, self.delta_q, self.delta_tilde)]

    def reconstruction_error(self) -> float:
        """Max abs coordinate difference between applied and reconstructed updates."""
        if self.applied is None:
            raise ValueError("applied update not recorded")
        return max(float(np.max(np.abs(a - r))) for a, r in zip(self.applied, self.reconstructed_update()))


def error_decomposition(model: PipelineModel, params, sid: int, data: Dataset, cfg: TrainConfig,
                        snap: StepSnapshot, step: int, expected_grads=None) -> ErrorBreakdown:
    """Replay a step from its snapshot and split the applied gradient into parts.

    Works on copies only; the protocol's buffers and streams are untouched.
    If ``expected_grads`` is given the replay must reproduce it bitwise.
    """
    xi, y = data.X[sid], data.Y[sid]
    trace = compressed_pass(
        model, params, sid, xi, y, cfg,
        [b.restricted(sid) for b in snap.buffers],
        [r.clone() for r in snap.fw_rngs],
        [r.clone() for r in snap.bw_rngs],
        [r.clone() for r in snap.buf_rngs],
        step,
    )
    if trace.diverged:
        raise SnapshotMismatchError("replayed step diverged")
    if expected_grads is not None and not all(np.array_equal(a, b) for a, b in zip(trace.grads, expected_grads)):
        raise SnapshotMismatchError(f"replay of step {step} does not reproduce the applied gradient")
    _, g_m = model.sample_grad(params, xi, y, inputs=trace.inputs)
    _, g_x = model.sample_grad(params, xi, y)
    exact = model.activations(params, xi)
    return ErrorBreakdown(
        step=step,
        sample_id=sid,
        delta=[a - m for a, m in zip(exact, trace.inputs[1:])],
        delta_q=[ga - gm for ga, gm in zip(trace.grads, g_m)],
        delta_tilde=[gm - gx for gm, gx in zip(g_m, g_x)],
        g_exact=g_x,
        messages=[m.copy() for m in trace.inputs[1:]],
        params=[p.copy() for p in params],
    )


def estimate_sigma(model: PipelineModel, params, data: Dataset) -> float:
    """Root mean squared deviation of per-sample gradients from the full gradient."""
    G = np.stack([np.concatenate(model.sample_grad(params, x, y)[1]) for x, y in zip(data.X, data.Y)])
    dev = G - G.mean(axis=0)
    return math.sqrt(float(np.mean(np.einsum("ij,ij->i", dev, dev))))


# ------------------------------------------------------------------- audits

def _holds(lhs: float, rhs: float) -> bool:
    return lhs <= rhs * (1.0 + REL_TOL) + ABS_TOL


def _entry(name: str, lhs: float, rhs: float, **extra) -> dict:
    ok = _holds(lhs, rhs)
    out = {"name": name, "lhs": lhs, "rhs": rhs, "slack": rhs - lhs,
           "ratio": (lhs / rhs) if rhs > 0 else (0.0 if lhs == 0 else math.inf), "pass": ok}
    out.update(extra)
    return out


def _per_step(name, pairs) -> dict:
    """Summarize per-step ``(lhs, rhs)`` pairs by their worst step."""
    pairs = list(pairs)
    if not pairs:
        return _entry(name, 0.0, 0.0, steps=0, violations=0, max_ratio=0.0)
    violations = sum(not _holds(l, r) for l, r in pairs)

    def ratio(p):
        l, r = p
        return l / r if r > 0 else (0.0 if l == 0 else math.inf)

    worst = max(pairs, key=ratio)
    out = _entry(name, worst[0], worst[1], steps=len(pairs), violations=violations, max_ratio=ratio(worst))
    out["pass"] = violations == 0
    return out


def audit_lemma1(breakdowns, constants: TheoremConstants, box_check=None) -> dict:
    """Per-step check of the backward-quantization and message-error bounds.

    ``hard`` is true only for fully certified constants; violations are then
    failures. ``box_check(bd)`` may return False when a step left the region
    where the certified constants are valid; such steps are counted.
    """
    q_bound, t_factor = lemma1_bounds(constants)
    bds = list(breakdowns)
    report = {
        "schema": AUDIT_SCHEMA,
        "audit": "lemma1",
        "hard": constants.certified,
        "constants": constants.to_dict(),
        "inequalities": [
            _per_step("backward_quantization_error", ((b.delta_q_norm, q_bound) for b in bds)),
            _per_step("message_induced_error", ((b.delta_tilde_norm, t_factor * b.delta_norm) for b in bds)),
        ],
    }
    if box_check is not None:
        report["out_of_box_steps"] = sum(not box_check(b) for b in bds)
    report["pass"] = all(e["pass"] for e in report["inequalities"]) and not report.get("out_of_box_steps", 0)
    return report


def audit_lemma2_theorem1(result: RunResult, constants: TheoremConstants, T: int | None = None,
                          f_star: float | None = None, f_star_label: str = "exact") -> dict:
    """Aggregate message-error bound plus the realized convergence ratio.

    Uses the run's full-batch gradient checkpoints and its estimated
    ``sigma_hat``. The convergence bound hides a universal constant, so its
    entry only reports the ratio and never fails.
    """
    if not result.grad_checkpoints:
        raise MissingShadowGradientsError("run has no full-batch gradient checkpoints (enable analysis)")
    T = T or len(result.metrics)
    c = compute_theorem_constants(constants, T)
    lhs = float(np.mean([m.delta_norm_total ** 2 for m in result.metrics]))
    grad_sq = float(np.mean([g for _, g in result.grad_checkpoints]))
    sigma = result.sigma_hat if result.sigma_hat is not None else c.sigma
    q_term = (c.c_Q * c.C_tilde) ** 2
    gamma = result.lr
    rhs = c.C_prime * gamma * gamma * (grad_sq + sigma * sigma + q_term)
    lemma2 = _entry("message_error_mean_square", lhs, rhs, gamma=gamma, gamma_theorem=c.gamma,
                    mean_grad_sq=grad_sq, sigma_hat=sigma)
    lemma2["gamma_admissible"] = gamma <= c.gamma * (1 + 1e-12)
    if f_star is None:
        f_star = min(m.loss for m in result.metrics) if result.metrics else 0.0
        f_star_label = "best_observed_loss"
    f1 = result.initial_loss
    thm_rhs = ((c.C + c.L_f) * (f1 - f_star) + sigma * sigma + q_term) / math.sqrt(T)
    theorem = {
        "name": "convergence_rate",
        "lhs": grad_sq,
        "rhs": thm_rhs,
        "slack": thm_rhs - grad_sq,
        "ratio": grad_sq / thm_rhs if thm_rhs > 0 else math.inf,
        "pass": None,
        "asserted": False,
        "f_star": f_star,
        "f_star_kind": f_star_label,
    }
    return {
        "schema": AUDIT_SCHEMA,
        "audit": "lemma2_theorem1",
        "hard": c.certified,
        "T": T,
        "constants": c.to_dict(),
        "inequalities": [lemma2, theorem],
        "pass": lemma2["pass"],
    }


def toy_box_check(toy: ToyLQ, data: Dataset):
    """Predicate: a step's parameters and messages lie inside the certified box."""

    def check(bd: ErrorBreakdown) -> bool:
        return toy.params_in_box(bd.params) and all(toy.activation_in_box(m, data) for m in bd.messages)

    return check


def audit_json(*reports) -> str:
    return json.dumps({"schema": AUDIT_SCHEMA, "reports": list(reports)}, indent=2, sort_keys=True,
                      default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


# -------------------------------------------------------------------- trend

def _sign_test_p(neg: int, n: int) -> float:
    """One-sided p-value of seeing ``>= neg`` decreases out of ``n`` fair coin flips."""
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(neg, n + 1)) / 2.0**n


def stability_trend(metrics) -> dict:
    """Per-epoch mean message error and activation change, with a sign test."""
    metrics = list(metrics)
    epochs = sorted({m.epoch for m in metrics})
    if len(epochs) < 3:
        raise TooFewEpochsError(f"need >= 3 epochs, got {len(epochs)}")
    by = {e: [m for m in metrics if m.epoch == e] for e in epochs}
    mean_delta = [float(np.mean([m.delta_norm_total for m in by[e]])) for e in epochs]
    mean_change = [
        float(np.mean([math.sqrt(sum(c * c for c in m.act_change_norms)) for m in by[e]])) for e in epochs
    ]
    if all(d == 0.0 for d in mean_delta):
        return {"epochs": epochs, "mean_delta": mean_delta, "mean_act_change": mean_change,
                "trend": "undefined", "decreasing_steps": 0, "compared": 0, "sign_test_p": None,
                "last_below_second": None}
    # the first epoch is all first visits; compare compressed epochs only
    series = mean_delta[1:]
    diffs = [b - a for a, b in zip(series, series[1:])]
    neg = sum(d < 0 for d in diffs)
    n = sum(d != 0 for d in diffs)
    return {
        "epochs": epochs,
        "mean_delta": mean_delta,
        "mean_act_change": mean_change,
        "trend": "decreasing" if mean_delta[-1] < mean_delta[1] else "not_decreasing",
        "decreasing_steps": neg,
        "compared": n,
        "sign_test_p": _sign_test_p(neg, n),
        "last_below_second": mean_delta[-1] < mean_delta[1],
    }


def visit_decay_ratios(metrics, boundary: int = 0) -> list[float]:
    """Ratios of consecutive per-visit message errors for each sample at a boundary."""
    last: dict[int, float] = {}
    ratios = []
    for m in metrics:
        d = m.delta_norms[boundary]
        prev = last.get(m.sample_id)
        if prev is not None and prev > 0:
            ratios.append(d / prev)
        last[m.sample_id] = d
    return ratios


# ------------------------------------------------------ empirical constants

def _stage_param_jacobian(stage, p, x) -> np.ndarray:
    n = stage.n_out
    return np.stack([stage.backward(p, x, e)[0] for e in np.eye(n)])


def _downstream_grads(model: PipelineModel, params, i: int, h, y):
    """Gradient of the loss of stages ``i+1..K`` wrt (boundary input ``h``, their params)."""
    inputs = [h]
    for s, p in zip(model.stages[i + 1:-1], params[i + 1:-1]):
        inputs.append(s.forward(p, inputs[-1]))
    last = model.stages[-1]
    _, gp, g = last.loss_and_grad(params[-1], inputs[-1], y)
    grads = [gp]
    for k in range(len(inputs) - 2, -1, -1):
        gk, g = model.stages[i + 1 + k].backward(params[i + 1 + k], inputs[k], g)
        grads.append(gk)
    return np.concatenate([g] + grads[::-1])


def empirical_constants(model: PipelineModel, data: Dataset, iterates, c_Q: float, seed: int = 0,
                        probes: int = 4, eps: float = 1e-3) -> TheoremConstants:
    """Trajectory suprema of the quantities the bounds need (labelled empirical).

    Lipschitz constants are max ratios of gradient differences over random
    perturbations of size ``eps`` around points visited along ``iterates``.
    """
    rng = RngStream(seed, 7)
    K = model.K
    nb = K - 1
    C_a = [0.0] * nb
    C_down = [0.0] * nb
    L_down = [0.0] * nb
    ell = [0.0] * K
    L_in = [0.0] * K
    sig = 0.0
    L_f = 0.0
    iterates = list(iterates)
    prev_full = None
    for params in iterates:
        sig = max(sig, estimate_sigma(model, params, data))
        full = np.concatenate(model.full_gradient(params, data))
        if prev_full is not None:
            dx = l2_norm(np.concatenate(params) - prev_full[0])
            if dx > 0:
                L_f = max(L_f, l2_norm(full - prev_full[1]) / dx)
        prev_full = (np.concatenate(params), full)
        for sid in rng.integers(0, data.N, size=probes):
            xi, y = data.X[sid], data.Y[sid]
            inputs = [xi] + model.activations(params, xi)
            for k in range(K):
                s = model.stages[k]
                if k < K - 1:
                    J = _stage_param_jacobian(s, params[k], inputs[k])
                    nrm = float(np.linalg.norm(J, 2))
                    ell[k] = max(ell[k], nrm)
                    if k < nb:
                        C_a[k] = max(C_a[k], nrm)
                    u = rng.normal(inputs[k].shape)
                    x2 = inputs[k] + eps * u / l2_norm(u)
                    J2 = _stage_param_jacobian(s, params[k], x2)
                    L_in[k] = max(L_in[k], float(np.linalg.norm(J2 - J, 2)) / eps)
                else:
                    # last stage: Lipschitz of the loss value in its params
                    ell[k] = max(ell[k], l2_norm(s.loss_and_grad(params[k], inputs[k], y)[1]))
            for i in range(nb):
                g0 = _downstream_grads(model, params, i, inputs[i + 1], y)
                C_down[i] = max(C_down[i], l2_norm(g0))
                dh = rng.normal(inputs[i + 1].shape)
                dp = [rng.normal(p.shape) for p in params[i + 1:]]
                scale = eps / math.sqrt(float(dh @ dh) + sum(float(v @ v) for v in dp))
                shifted = list(params[: i + 1]) + [p + scale * v for p, v in zip(params[i + 1:], dp)]
                g1 = _downstream_grads(model, shifted, i, inputs[i + 1] + scale * dh, y)
                L_down[i] = max(L_down[i], l2_norm(g1 - g0) / eps)
    if L_f == 0.0:
        L_f = max(L_down)
    prov = {k: EMPIRICAL for k in ("L_f", "ell_a", "C_a", "L_down", "C_down", "sigma", "c_Q", "L_a_input")}
    return TheoremConstants(
        L_f=L_f,
        ell_a=tuple(ell[:1]) if K == 2 else tuple(ell),
        C_a=tuple(C_a), L_down=tuple(L_down), C_down=tuple(C_down),
        sigma=sig, c_Q=c_Q, N=data.N, K=K,
        L_a_input=() if K == 2 else tuple(L_in),
        provenance=prov,
    )

"""Delta-compressed pipeline SGD plus the FP32 and DirectQ baselines.

Forward activations crossing a boundary are sent as ``Q(a - m)`` against a
per-sample message ``m`` that both sides of the boundary keep in an
:class:`ActivationBuffer`; the first time a sample crosses, the activation is
sent uncompressed. Backward gradients are quantized directly.

Both stages of a step read the pre-step parameters (``x_{t+1} = x_t - lr*(g + err)``).
``TrainConfig.sequential_update`` switches to the line-by-line ordering in
which a stage updates its parameters before producing the gradient it sends
upstream.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import Dataset, PipelineModel
from .numerics import (
    BACKWARD,
    BUFFER,
    FORWARD,
    SAMPLING_STREAM,
    NonFiniteError,
    RngStream,
    boundary_stream_id,
    l2_norm,
)
from .quantize import (
    IDENTITY,
    QuantizedPayload,
    QuantizerSpec,
    Scheme,
    dequantize,
    encoded_bytes,
    quantize,
    range_spec,
)

AQSGD = "aqsgd"
DIRECTQ = "directq"
FP32 = "fp32"
MODES = (AQSGD, DIRECTQ, FP32)

EPOCH_SHUFFLE = "epoch_shuffle"
UNIFORM = "uniform"
FIRST_VISIT_EXACT = "first_visit_exact"
ZERO_INIT = "zero_init"

DIVERGENCE_LOSS = 1e12


class ConfigError(ValueError):
    pass


class ProtocolCorruptionError(RuntimeError):
    """Sender and receiver copies of a message buffer disagree."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = AQSGD
    K: int = 2
    fw: QuantizerSpec = field(default_factory=lambda: range_spec(4))
    bw: QuantizerSpec = field(default_factory=lambda: range_spec(8))
    buffer_bits: int | None = None
    lr: float | str = 0.05
    epochs: int = 10
    steps: int | None = None
    sampling: str = EPOCH_SHUFFLE
    seed: int = 0
    warmup: str = FIRST_VISIT_EXACT
    sequential_update: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.sampling not in (EPOCH_SHUFFLE, UNIFORM):
            raise ConfigError(f"unknown sampling policy {self.sampling!r}")
        if self.warmup not in (FIRST_VISIT_EXACT, ZERO_INIT):
            raise ConfigError(f"unknown warmup {self.warmup!r}")
        if self.buffer_bits is not None and not 2 <= self.buffer_bits <= 16:
            raise ConfigError("buffer bits must be in [2, 16] or None (full precision)")
        if isinstance(self.lr, str):
            if self.lr != "theorem":
                raise ConfigError("lr must be a positive float or 'theorem'")
        elif not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError("lr must be a nonnegative finite float")
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ConfigError("epochs/steps must be nonnegative")
        if self.mode == FP32:
            object.__setattr__(self, "fw", IDENTITY)
            object.__setattr__(self, "bw", IDENTITY)
        if self.mode != AQSGD:
            object.__setattr__(self, "buffer_bits", None)

    def total_steps(self, N: int) -> int:
        return self.steps if self.steps is not None else self.epochs * N

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class StepMetrics:
    step: int
    epoch: int
    sample_id: int
    loss: float
    grad_norm: float
    delta_norms: tuple
    act_change_norms: tuple
    bytes_fw: int
    bytes_bw: int
    first_visit: bool
    delta_q_norm: float | None = None
    delta_tilde_norm: float | None = None

    @property
    def delta_norm_total(self) -> float:
        return math.sqrt(sum(d * d for d in self.delta_norms))


class ActivationBuffer:
    """Per-sample messages for one boundary; one copy per side in worker mode."""

    def __init__(self, boundary: int, dim: int, bits: int | None = None):
        self.boundary = boundary
        self.dim = dim
        self.bits = bits
        self.entries: dict[int, np.ndarray] = {}
        self.visits: dict[int, list[int]] = {}

    def __contains__(self, sid) -> bool:
        return sid in self.entries

    def __len__(self):
        return len(self.entries)

    def get(self, sid) -> np.ndarray:
        return self.entries[sid]

    def store(self, sid: int, m: np.ndarray, step: int, rng: RngStream | None) -> np.ndarray:
        if self.bits is not None:
            spec = range_spec(self.bits)
            m = dequantize(spec, quantize(spec, m, rng))
        self.entries[sid] = m
        self.visits.setdefault(sid, []).append(step)
        return m

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for sid in sorted(self.entries):
            h.update(int(sid).to_bytes(8, "little"))
            h.update(np.ascontiguousarray(self.entries[sid], dtype="<f8").tobytes())
        return h.hexdigest()

    def restricted(self, sid) -> "ActivationBuffer":
        """Copy holding only ``sid``'s entry (used for replay)."""
        twin = ActivationBuffer(self.boundary, self.dim, self.bits)
        if sid in self.entries:
            twin.entries[sid] = self.entries[sid].copy()
            twin.visits[sid] = list(self.visits[sid])
        return twin


def _raw(x: np.ndarray) -> QuantizedPayload:
    return QuantizedPayload(Scheme.IDENTITY, 0, 0.0, raw=x)


def encode_forward(buffer: ActivationBuffer, sid: int, activation: np.ndarray,
                   fw: QuantizerSpec, rng: RngStream, warmup: str = FIRST_VISIT_EXACT) -> QuantizedPayload:
    """Sender side: raw activation on a first visit (or Identity), else ``Q(a - m)``."""
    if activation.shape != (buffer.dim,):
        raise ValueError(f"activation dim {activation.shape} does not match boundary dim {buffer.dim}")
    seen = sid in buffer
    if fw.scheme == Scheme.IDENTITY or (not seen and warmup == FIRST_VISIT_EXACT):
        return _raw(activation.copy())
    base = buffer.get(sid) if seen else np.zeros(buffer.dim)
    return quantize(fw, activation - base, rng)


def apply_forward(buffer: ActivationBuffer, sid: int, payload: QuantizedPayload,
                  fw: QuantizerSpec, step: int, rng: RngStream | None) -> np.ndarray:
    """Both sides: update ``m`` from a payload and return the received activation."""
    if payload.dim != buffer.dim:
        raise ValueError("payload dim does not match boundary dim")
    if payload.scheme == Scheme.IDENTITY:
        buffer.store(sid, payload.raw.copy(), step, rng)
        return payload.raw.copy()
    base = buffer.get(sid) if sid in buffer else np.zeros(buffer.dim)
    return buffer.store(sid, base + dequantize(fw, payload), step, rng)


def payload_bytes(payload: QuantizedPayload) -> int:
    d = payload.dim
    if payload.scheme == Scheme.IDENTITY:
        return encoded_bytes(IDENTITY, d)
    return encoded_bytes(QuantizerSpec(payload.scheme, payload.bits), d)


def forward_exchange(buffer: ActivationBuffer, sid: int, activation: np.ndarray, fw: QuantizerSpec,
                     rng: RngStream, step: int = 0, buffer_rng: RngStream | None = None,
                     warmup: str = FIRST_VISIT_EXACT) -> tuple[np.ndarray, int]:
    """Reference-mode exchange: encode, then apply to the (single, mirrored) buffer."""
    payload = encode_forward(buffer, sid, activation, fw, rng, warmup)
    received = apply_forward(buffer, sid, payload, fw, step, buffer_rng)
    return received, payload_bytes(payload)


def backward_exchange(grad: np.ndarray, bw: QuantizerSpec, rng: RngStream, dim: int | None = None):
    """Direct quantization of a backward gradient (no buffering)."""
    if dim is not None and grad.shape != (dim,):
        raise ValueError("gradient dim does not match boundary dim")
    p = quantize(bw, grad, rng)
    return dequantize(bw, p), payload_bytes(p)


def direct_exchange(activation: np.ndarray, fw: QuantizerSpec, rng: RngStream):
    p = quantize(fw, activation, rng)
    return dequantize(fw, p), payload_bytes(p)


@dataclass
class PipelineState:
    """Everything a reference-mode run carries between steps besides parameters."""

    buffers: list
    fw_rngs: list
    bw_rngs: list
    buf_rngs: list
    last_act: list

    @classmethod
    def create(cls, model: PipelineModel, cfg: TrainConfig) -> "PipelineState":
        dims = model.boundary_dims
        buffers = [ActivationBuffer(i, d, cfg.buffer_bits) for i, d in enumerate(dims)] if cfg.mode == AQSGD else []
        return cls(
            buffers=buffers,
            fw_rngs=[RngStream(cfg.seed, boundary_stream_id(i, FORWARD)) for i in range(len(dims))],
            bw_rngs=[RngStream(cfg.seed, boundary_stream_id(i, BACKWARD)) for i in range(len(dims))],
            buf_rngs=[RngStream(cfg.seed, boundary_stream_id(i, BUFFER)) for i in range(len(dims))],
            last_act=[{} for _ in dims],
        )


@dataclass
class PassTrace:
    inputs: list          # stage inputs: xi, then the received messages m_bar^(i)
    loss: float
    grads: list           # per-stage gradients actually applied
    bytes_fw: int
    bytes_bw: int
    first_visit: bool
    diverged: bool = False


def compressed_pass(model: PipelineModel, params, sid: int, xi, y, cfg: TrainConfig,
                    buffers, fw_rngs, bw_rngs, buf_rngs, step: int, lr: float = 0.0) -> PassTrace:
    """Forward through the exchanges, then backward through quantized gradients."""
    K = model.K
    inputs = [xi]
    bytes_fw = 0
    first = cfg.mode == AQSGD and bool(buffers) and sid not in buffers[0]
    h = xi
    for i in range(K - 1):
        act = model.stages[i].forward(params[i], h)
        if cfg.mode == AQSGD:
            h, nb = forward_exchange(buffers[i], sid, act, cfg.fw, fw_rngs[i], step, buf_rngs[i], cfg.warmup)
        else:
            h, nb = direct_exchange(act, cfg.fw, fw_rngs[i])
        bytes_fw += nb
        inputs.append(h)

    last = model.stages[-1]
    loss, gp, g = last.loss_and_grad(params[-1], h, y)
    if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
        return PassTrace(inputs, loss, [], bytes_fw, 0, first, diverged=True)
    grads = [None] * K
    grads[-1] = gp
    if cfg.sequential_update:
        g = last.loss_and_grad(params[-1] - lr * gp, h, y)[2]
    bytes_bw = 0
    for i in range(K - 2, -1, -1):
        q, nb = backward_exchange(g, cfg.bw, bw_rngs[i])
        bytes_bw += nb
        grads[i], g = model.stages[i].backward(params[i], inputs[i], q)
        if cfg.sequential_update and i > 0:
            g = model.stages[i].backward(params[i] - lr * grads[i], inputs[i], q)[1]
    return PassTrace(inputs, loss, grads, bytes_fw, bytes_bw, first)


def sgd_update(params, grads, lr: float):
    return [p - lr * g for p, g in zip(params, grads)]


def pipeline_step(model: PipelineModel, params, sid: int, data: Dataset, state: PipelineState,
                  cfg: TrainConfig, step: int, lr: float, epoch: int = 0):
    """One reference-mode step for any K >= 2. Returns ``(new_params, metrics, trace)``."""
    xi, y = data.X[sid], data.Y[sid]
    exact = model.activations(params, xi)
    trace = compressed_pass(model, params, sid, xi, y, cfg, state.buffers,
                            state.fw_rngs, state.bw_rngs, state.buf_rngs, step, lr)
    deltas = tuple(l2_norm(a - m) for a, m in zip(exact, trace.inputs[1:]))
    changes = []
    for i, a in enumerate(exact):
        prev = state.last_act[i].get(sid)
        changes.append(0.0 if prev is None else l2_norm(a - prev))
        state.last_act[i][sid] = a
    if trace.diverged:
        gnorm = math.nan
        new = params
    else:
        gnorm = math.sqrt(sum(float(g @ g) for g in trace.grads))
        new = sgd_update(params, trace.grads, lr)
    metrics = StepMetrics(step, epoch, sid, trace.loss, gnorm, deltas, tuple(changes),
                          trace.bytes_fw, trace.bytes_bw, trace.first_visit)
    return new, metrics, trace


def step_k2(model, params, sid, data, state, cfg, step, lr, epoch=0):
    if model.K != 2:
        raise ValueError("step_k2 needs a two-stage model")
    return pipeline_step(model, params, sid, data, state, cfg, step, lr, epoch)


def step_kgt2(model, params, sid, data, state, cfg, step, lr, epoch=0):
    if model.K < 3:
        raise ValueError("step_kgt2 needs K >= 3")
    return pipeline_step(model, params, sid, data, state, cfg, step, lr, epoch)


def sample_schedule(cfg: TrainConfig, N: int):
    """Yields ``(step, epoch, sample_id)``; steps are 1-based."""
    rng = RngStream(cfg.seed, SAMPLING_STREAM)
    T = cfg.total_steps(N)
    t = 0
    if cfg.sampling == UNIFORM:
        while t < T:
            sid = int(rng.integers(0, N))
            t += 1
            yield t, (t - 1) // N, sid
        return
    epoch = 0
    while t < T:
        for sid in rng.permutation(N):
            if t >= T:
                return
            t += 1
            yield t, epoch, int(sid)
        epoch += 1


@dataclass
class RunResult:
    metrics: list
    params: list
    diverged: bool
    final_loss: float
    lr: float
    state: PipelineState | None = None
    breakdowns: list | None = None
    trajectory: list | None = None
    grad_checkpoints: list | None = None
    sigma_hat: float | None = None
    initial_loss: float | None = None


def resolve_lr(cfg: TrainConfig, N: int, constants=None) -> float:
    if cfg.lr != "theorem":
        return float(cfg.lr)
    if constants is None:
        raise ConfigError("lr='theorem' needs theorem constants")
    from .analysis import compute_theorem_constants

    return compute_theorem_constants(constants, cfg.total_steps(N)).gamma


def run_training(model: PipelineModel, data: Dataset, cfg: TrainConfig, params=None, *,
                 constants=None, analysis: bool = False, record_trajectory: bool = False,
                 grad_every: int | None = None, sigma_checkpoints: int = 10) -> RunResult:
    """Run the configured protocol in reference (single thread of control) mode.

    With ``analysis`` on, every step is decomposed into message and gradient
    errors against an uncompressed shadow pass, and full-batch gradients are
    recorded every ``grad_every`` steps. Shadow passes replay cloned random
    streams and never advance the protocol's own streams.
    """
    if data.in_dim != model.in_dim or data.out_dim != model.stages[-1].n_out:
        raise ConfigError("dataset dimensions do not match the model")
    if model.K != cfg.K:
        raise ConfigError(f"config K={cfg.K} but model has {model.K} stages")
    if analysis and cfg.sequential_update:
        raise ConfigError("error decomposition assumes the simultaneous update")
    lr = resolve_lr(cfg, data.N, constants)
    params = [p.copy() for p in (params if params is not None else model.init_params(cfg.seed))]
    state = PipelineState.create(model, cfg)
    T = cfg.total_steps(data.N)
    metrics, breakdowns, trajectory, checkpoints = [], [], [], []
    sigma_hat = 0.0
    if analysis:
        from . import analysis as an

        grad_every = grad_every or max(1, T // 1000)
        sigma_at = set(np.linspace(1, max(T, 1), sigma_checkpoints).round().astype(int).tolist())
    initial_loss = model.full_loss(params, data)
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for step, epoch, sid in sample_schedule(cfg, data.N):
            if analysis:
                if (step - 1) % grad_every == 0:
                    full = model.full_gradient(params, data)
                    checkpoints.append((step, sum(float(g @ g) for g in full)))
                if step in sigma_at:
                    sigma_hat = max(sigma_hat, an.estimate_sigma(model, params, data))
                snap = an.StepSnapshot.capture(state, sid)
            before = params
            try:
                params, m, trace = pipeline_step(model, params, sid, data, state, cfg, step, lr, epoch)
            except NonFiniteError:
                diverged = True
                break
            if analysis and not trace.diverged:
                bd = an.error_decomposition(model, before, sid, data, cfg, snap, step, trace.grads)
                m.delta_q_norm = bd.delta_q_norm
                m.delta_tilde_norm = bd.delta_tilde_norm
                bd.applied = [b - a for a, b in zip(before, params)]
                bd.lr = lr
                breakdowns.append(bd)
            metrics.append(m)
            if trace.diverged:
                diverged = True
                break
            if record_trajectory:
                trajectory.append([p.copy() for p in params])
    final = math.inf if diverged else model.full_loss(params, data)
    if not math.isfinite(final) or final > DIVERGENCE_LOSS:
        diverged, final = True, math.inf
    return RunResult(
        metrics=metrics, params=params, diverged=diverged, final_loss=final, lr=lr, state=state,
        breakdowns=breakdowns if analysis else None,
        trajectory=trajectory if record_trajectory else None,
        grad_checkpoints=checkpoints if analysis else None,
        sigma_hat=sigma_hat if analysis else None,
        initial_loss=initial_loss,
    )

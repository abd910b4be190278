"""K-worker execution: one thread per stage joined by bounded in-process channels.

Each worker owns its stage parameters, its quantizer streams and its copy of
the message buffer on each adjacent boundary. Messages travel as wire frames
(16-byte header plus the encoded payload), so the receiver reconstructs
everything from bytes. After every step each worker reports digests of its
buffer copies and the coordinator checks that both sides of every boundary
agree.

Frame header, little endian::

    offset size field
    0      8    step index
    8      4    sample id
    12     2    boundary id (0-based)
    14     1    direction (0 forward, 1 backward, 2 halt)
    15     1    scheme id (0 identity, 1 l2, 2 range)
"""

from __future__ import annotations

import math
import queue
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .model import Dataset, PipelineModel
from .numerics import BACKWARD, BUFFER, FORWARD, RngStream, boundary_stream_id, l2_norm
from .protocol import (
    AQSGD,
    DIVERGENCE_LOSS,
    ActivationBuffer,
    ConfigError,
    ProtocolCorruptionError,
    RunResult,
    StepMetrics,
    TrainConfig,
    apply_forward,
    encode_forward,
    payload_bytes,
    resolve_lr,
    sample_schedule,
)
from .quantize import (
    IDENTITY,
    QuantizerSpec,
    Scheme,
    decode_payload,
    dequantize,
    encode_payload,
    quantize,
)

HEADER = struct.Struct("<QIHBB")
DIR_FORWARD = 0
DIR_BACKWARD = 1
DIR_HALT = 2
CHANNEL_CAPACITY = 4
TIMEOUT_S = 60.0


@dataclass(frozen=True)
class FrameHeader:
    step: int
    sample_id: int
    boundary: int
    direction: int
    scheme: int


def encode_frame(h: FrameHeader, body: bytes = b"") -> bytes:
    return HEADER.pack(h.step, h.sample_id, h.boundary, h.direction, h.scheme) + body


def decode_frame(frame: bytes) -> tuple[FrameHeader, bytes]:
    if len(frame) < HEADER.size:
        raise ProtocolCorruptionError("frame shorter than header")
    h = FrameHeader(*HEADER.unpack_from(frame))
    if h.direction not in (DIR_FORWARD, DIR_BACKWARD, DIR_HALT):
        raise ProtocolCorruptionError(f"bad direction flag {h.direction}")
    return h, frame[HEADER.size:]


class _Aborted(Exception):
    pass


class StageWorker(threading.Thread):
    def __init__(self, k, model, params, cfg, data, lr, fwd_in, fwd_out, bwd_in, bwd_out,
                 control, results, frame_filter=None):
        super().__init__(name=f"stage-{k}", daemon=True)
        self.k, self.model, self.cfg, self.data, self.lr = k, model, cfg, data, lr
        self.stage = model.stages[k]
        self.params = params.copy()
        self.fwd_in, self.fwd_out, self.bwd_in, self.bwd_out = fwd_in, fwd_out, bwd_in, bwd_out
        self.control, self.results = control, results
        self.frame_filter = frame_filter
        K = model.K
        dims = model.boundary_dims
        seed = cfg.seed
        aq = cfg.mode == AQSGD
        # sender side of boundary k, receiver side of boundary k-1
        self.send_buf = ActivationBuffer(k, dims[k], cfg.buffer_bits) if aq and k < K - 1 else None
        self.recv_buf = ActivationBuffer(k - 1, dims[k - 1], cfg.buffer_bits) if aq and k > 0 else None
        self.fw_rng = RngStream(seed, boundary_stream_id(k, FORWARD)) if k < K - 1 else None
        self.send_buf_rng = RngStream(seed, boundary_stream_id(k, BUFFER)) if k < K - 1 else None
        self.bw_rng = RngStream(seed, boundary_stream_id(k - 1, BACKWARD)) if k > 0 else None
        self.recv_buf_rng = RngStream(seed, boundary_stream_id(k - 1, BUFFER)) if k > 0 else None
        self.last_act: dict[int, np.ndarray] = {}
        self._rep: dict = {}

    def _send(self, chan, frame: bytes):
        if self.frame_filter is not None:
            frame = self.frame_filter(frame)
        chan.put(frame, timeout=TIMEOUT_S)

    def _recv(self, chan, step, sid, boundary, direction):
        h, body = decode_frame(chan.get(timeout=TIMEOUT_S))
        if h.direction == DIR_HALT:
            raise _Aborted()
        if (h.step, h.sample_id, h.boundary, h.direction) != (step, sid, boundary, direction):
            raise ProtocolCorruptionError(f"stage {self.k} expected step {step} sample {sid}, got {h}")
        return h, body

    def _spec_for(self, scheme: int, spec: QuantizerSpec) -> QuantizerSpec:
        return IDENTITY if scheme == Scheme.IDENTITY else spec

    def _halt_upstream(self, step, sid):
        if self.k > 0:
            self._send(self.bwd_out, encode_frame(FrameHeader(step, sid, self.k - 1, DIR_HALT, 0)))

    def run(self):
        try:
            while True:
                cmd = self.control.get()
                if cmd is None:
                    self.results.put(("final", self.k, self.params))
                    return
                try:
                    self.results.put(("step", self.k, self._step(*cmd)))
                except _Aborted:
                    self._halt_upstream(cmd[0], cmd[2])
                    self.results.put(("step", self.k, {**self._rep, "bytes_bw": 0, "diverged": True}))
        except BaseException as e:  # reported to the coordinator
            self.results.put(("error", self.k, e))

    def _step(self, step, epoch, sid):
        cfg, K, k = self.cfg, self.model.K, self.k
        rep = self._rep = {"bytes_fw": 0, "bytes_bw": 0, "diverged": False}
        if k == 0:
            h = self.data.X[sid]
        else:
            hdr, body = self._recv(self.fwd_in, step, sid, k - 1, DIR_FORWARD)
            spec = self._spec_for(hdr.scheme, cfg.fw)
            payload = decode_payload(body, spec, self.model.boundary_dims[k - 1])
            if self.recv_buf is not None:
                h = apply_forward(self.recv_buf, sid, payload, cfg.fw, step, self.recv_buf_rng)
            else:
                h = dequantize(spec, payload)

        if k < K - 1:
            act = self.stage.forward(self.params, h)
            if self.send_buf is not None:
                rep["first_visit"] = sid not in self.send_buf
                payload = encode_forward(self.send_buf, sid, act, cfg.fw, self.fw_rng, cfg.warmup)
                m = apply_forward(self.send_buf, sid, payload, cfg.fw, step, self.send_buf_rng)
            else:
                rep["first_visit"] = False
                payload = quantize(cfg.fw, act, self.fw_rng)
                m = dequantize(cfg.fw, payload)
            rep["delta"] = l2_norm(act - m)
            prev = self.last_act.get(sid)
            rep["change"] = 0.0 if prev is None else l2_norm(act - prev)
            self.last_act[sid] = act
            rep["bytes_fw"] = payload_bytes(payload)
            self._send(self.fwd_out, encode_frame(FrameHeader(step, sid, k, DIR_FORWARD, int(payload.scheme)),
                                                  encode_payload(payload)))
            hdr, body = self._recv(self.bwd_in, step, sid, k, DIR_BACKWARD)
            q = dequantize(cfg.bw, decode_payload(body, self._spec_for(hdr.scheme, cfg.bw), len(act)))
            gp, g = self.stage.backward(self.params, h, q)
            if cfg.sequential_update and k > 0:
                g = self.stage.backward(self.params - self.lr * gp, h, q)[1]
        else:
            loss, gp, g = self.stage.loss_and_grad(self.params, h, self.data.Y[sid])
            rep["loss"] = loss
            if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
                self._halt_upstream(step, sid)
                rep["diverged"] = True
                return rep
            if cfg.sequential_update:
                g = self.stage.loss_and_grad(self.params - self.lr * gp, h, self.data.Y[sid])[2]

        if k > 0:
            p = quantize(cfg.bw, g, self.bw_rng)
            rep["bytes_bw"] = payload_bytes(p)
            self._send(self.bwd_out, encode_frame(FrameHeader(step, sid, k - 1, DIR_BACKWARD, int(p.scheme)),
                                                  encode_payload(p)))
        rep["gsq"] = float(gp @ gp)
        self.params = self.params - self.lr * gp
        rep["digests"] = {
            "send": self.send_buf.digest() if self.send_buf is not None else None,
            "recv": self.recv_buf.digest() if self.recv_buf is not None else None,
        }
        return rep


def run_workers(model: PipelineModel, data: Dataset, cfg: TrainConfig, params=None, *,
                constants=None, check_digests: bool = True, frame_filter=None) -> RunResult:
    """Run the configured protocol with one worker thread per stage.

    Produces the same parameters, losses, gradient norms and byte counts as
    :func:`aqsgd.protocol.run_training`. The per-boundary message error is
    measured locally by the sender (its activation minus the shared message);
    for K = 2 this equals the reference value.

    ``frame_filter`` sees (and may alter) every frame in transit; tests use
    it to inject corruption. Buffer digest disagreement raises
    :class:`ProtocolCorruptionError`.
    """
    if model.K != cfg.K:
        raise ConfigError(f"config K={cfg.K} but model has {model.K} stages")
    K = model.K
    lr = resolve_lr(cfg, data.N, constants)
    params = [p.copy() for p in (params if params is not None else model.init_params(cfg.seed))]
    initial_loss = model.full_loss(params, data)
    fwd = [queue.Queue(CHANNEL_CAPACITY) for _ in range(K - 1)]
    bwd = [queue.Queue(CHANNEL_CAPACITY) for _ in range(K - 1)]
    controls = [queue.Queue() for _ in range(K)]
    results: queue.Queue = queue.Queue()
    workers = [
        StageWorker(k, model, params[k], cfg, data, lr,
                    fwd[k - 1] if k > 0 else None, fwd[k] if k < K - 1 else None,
                    bwd[k] if k < K - 1 else None, bwd[k - 1] if k > 0 else None,
                    controls[k], results, frame_filter)
        for k in range(K)
    ]
    for w in workers:
        w.start()

    def collect(kind):
        got = {}
        while len(got) < K:
            tag, k, payload = results.get(timeout=TIMEOUT_S)
            if tag == "error":
                _shutdown()
                raise payload
            if tag != kind:
                raise ProtocolCorruptionError(f"unexpected {tag} report from stage {k}")
            got[k] = payload
        return [got[k] for k in range(K)]

    def _shutdown():
        for c in controls:
            c.put(None)

    metrics, diverged = [], False
    with np.errstate(over="ignore", invalid="ignore"):
        for step, epoch, sid in sample_schedule(cfg, data.N):
            for c in controls:
                c.put((step, epoch, sid))
            reps = collect("step")
            loss = reps[-1].get("loss", math.nan)
            if any(r["diverged"] for r in reps):
                diverged = True
                metrics.append(_metrics(step, epoch, sid, loss, math.nan, reps, cfg))
                break
            if check_digests:
                for b in range(K - 1):
                    s, r = reps[b]["digests"]["send"], reps[b + 1]["digests"]["recv"]
                    if s != r:
                        _shutdown()
                        raise ProtocolCorruptionError(f"buffer copies at boundary {b} differ after step {step}")
            gnorm = math.sqrt(sum(r["gsq"] for r in reps))
            metrics.append(_metrics(step, epoch, sid, loss, gnorm, reps, cfg))
    _shutdown()
    finals = collect("final")
    for w in workers:
        w.join(timeout=TIMEOUT_S)
    final = math.inf if diverged else model.full_loss(finals, data)
    if not math.isfinite(final) or final > DIVERGENCE_LOSS:
        diverged, final = True, math.inf
    return RunResult(metrics=metrics, params=finals, diverged=diverged, final_loss=final, lr=lr,
                     initial_loss=initial_loss)


def _metrics(step, epoch, sid, loss, gnorm, reps, cfg) -> StepMetrics:
    K = len(reps)
    return StepMetrics(
        step=step, epoch=epoch, sample_id=sid, loss=loss, grad_norm=gnorm,
        delta_norms=tuple(reps[b].get("delta", math.nan) for b in range(K - 1)),
        act_change_norms=tuple(reps[b].get("change", math.nan) for b in range(K - 1)),
        bytes_fw=sum(r["bytes_fw"] for r in reps),
        bytes_bw=sum(r["bytes_bw"] for r in reps),
        first_visit=bool(reps[0].get("first_visit", False)),
    )

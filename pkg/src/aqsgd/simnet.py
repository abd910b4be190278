"""Analytic throughput model of synchronous pipeline training over slow links.

A flush pushes ``M`` micro-batches through ``K`` stages GPipe style: every
forward, then every backward. Stages and links are treated as machines of a
flow shop that each micro-batch visits in order (stage 1, link 1, stage 2,
...); with identical micro-batches the makespan of such a line is
``sum(s) + (M - 1) * max(s)``. Backward runs the reversed line.

Message buffers cost a fetch before each forward and a store after each
backward. Both can overlap with the stage's own compute, so a stage whose
compute is ``c`` and buffer I/O is ``f`` takes ``max(c, f)``, i.e. only the
part of the I/O that compute cannot hide is charged.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .quantize import encoded_bytes, range_spec

RAW32 = "raw32"
DIRECTQ = "directq"
AQSGD = "aqsgd"
SIM_MODES = (RAW32, DIRECTQ, AQSGD)
SWEEP_COLUMNS = ("bandwidth_bps", "mode", "bits_fw", "bits_bw", "samples_per_sec")


@dataclass(frozen=True)
class LinkSpec:
    bandwidth: float  # bits per second
    latency: float = 0.0  # seconds, one way

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not self.latency >= 0:
            raise ValueError("latency must be nonnegative")


@dataclass(frozen=True)
class StageCost:
    forward: float
    backward: float
    payload_dim: int = 0  # activation elements sent to the next stage per micro-batch
    fetch: float = 0.0
    store: float = 0.0

    def __post_init__(self):
        if min(self.forward, self.backward, self.fetch, self.store) < 0 or self.payload_dim < 0:
            raise ValueError("stage costs must be nonnegative")


@dataclass(frozen=True)
class Compression:
    mode: str = RAW32
    bits_fw: int = 32
    bits_bw: int = 32

    def __post_init__(self):
        if self.mode not in SIM_MODES:
            raise ValueError(f"mode must be one of {SIM_MODES}")
        if self.mode == RAW32:
            object.__setattr__(self, "bits_fw", 32)
            object.__setattr__(self, "bits_bw", 32)

    def message_bytes(self, d: int, backward: bool) -> int:
        if d == 0:
            return 0
        if self.mode == RAW32:
            return 4 * d
        return encoded_bytes(range_spec(self.bits_bw if backward else self.bits_fw), d)

    @property
    def buffered(self) -> bool:
        return self.mode == AQSGD


def transfer_time(nbytes: int, link: LinkSpec) -> float:
    if nbytes < 0:
        raise ValueError("bytes must be nonnegative")
    return link.latency + 8.0 * nbytes / link.bandwidth


def _line_makespan(times, M: int) -> float:
    return float(sum(times) + (M - 1) * max(times)) if times else 0.0


@dataclass(frozen=True)
class FlushTime:
    seconds: float
    samples: int
    forward: float
    backward: float

    @property
    def samples_per_sec(self) -> float:
        return self.samples / self.seconds if self.seconds > 0 else math.inf


def epoch_time(K: int, micro_batches: int, costs, link: LinkSpec, compression: Compression,
               micro_batch_size: int = 1, flushes: int = 1) -> FlushTime:
    """Time for ``flushes`` pipeline flushes of ``micro_batches`` micro-batches."""
    costs = list(costs)
    if len(costs) != K or K < 1:
        raise ValueError("need one StageCost per stage")
    if micro_batches < 1 or micro_batch_size < 1 or flushes < 1:
        raise ValueError("micro_batches, micro_batch_size and flushes must be positive")
    buffered = compression.buffered
    fwd_line, bwd_line = [], []
    for k, c in enumerate(costs):
        fwd_line.append(max(c.forward, c.fetch) if buffered else c.forward)
        if k < K - 1:
            d = c.payload_dim * micro_batch_size
            fwd_line.append(transfer_time(compression.message_bytes(d, False), link))
    for k in range(K - 1, -1, -1):
        c = costs[k]
        bwd_line.append(max(c.backward, c.store) if buffered else c.backward)
        if k > 0:
            d = costs[k - 1].payload_dim * micro_batch_size
            bwd_line.append(transfer_time(compression.message_bytes(d, True), link))
    f = _line_makespan(fwd_line, micro_batches)
    b = _line_makespan(bwd_line, micro_batches)
    return FlushTime((f + b) * flushes, micro_batches * micro_batch_size * flushes, f * flushes, b * flushes)


@dataclass(frozen=True)
class Preset:
    K: int
    costs: tuple
    micro_batches: int
    micro_batch_size: int = 1
    notes: str = ""


def _gpt2xl_8stage() -> Preset:
    # 6 transformer layers per stage; backward includes recomputation (3x forward);
    # each message is one sequence of 1024 tokens at hidden size 1600; the
    # buffer lives on SSD (12 ms per access).
    d = 1600 * 1024
    stage = StageCost(forward=0.044, backward=0.132, payload_dim=d, fetch=0.012, store=0.012)
    last = StageCost(forward=0.044, backward=0.132, payload_dim=0, fetch=0.012, store=0.012)
    return Preset(K=8, costs=(stage,) * 7 + (last,), micro_batches=32,
                  notes="GPT2-XL scale: 8 stages, 44 ms forward per stage, 32 micro-batches per flush")


PRESETS = {"gpt2xl-8stage": _gpt2xl_8stage}


def preset(name: str) -> Preset:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def throughput(p: Preset, link: LinkSpec, compression: Compression) -> float:
    return epoch_time(p.K, p.micro_batches, p.costs, link, compression, p.micro_batch_size).samples_per_sec


def bandwidth_grid(lo: float = 1e7, hi: float = 1e11, n: int = 100) -> list[float]:
    return [float(v) for v in np.geomspace(lo, hi, n)]


def sweep(p: Preset, bandwidths, compressions, latency: float = 0.0) -> list[dict]:
    rows = []
    for bw in bandwidths:
        link = LinkSpec(bw, latency)
        for c in compressions:
            rows.append({
                "bandwidth_bps": bw,
                "mode": c.mode,
                "bits_fw": c.bits_fw,
                "bits_bw": c.bits_bw,
                "samples_per_sec": throughput(p, link, c),
            })
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in SWEEP_COLUMNS})
    return buf.getvalue()


def ratio_bands(p: Preset, fast: float = 1e10, slow: float = 1e8, bits: tuple = (4, 4)) -> dict:
    """Fast-to-slow throughput ratio for raw32 and the relative drop for compressed payloads."""
    raw = Compression(RAW32)
    comp = Compression(AQSGD, *bits)
    r_fast, r_slow = throughput(p, LinkSpec(fast), raw), throughput(p, LinkSpec(slow), raw)
    c_fast, c_slow = throughput(p, LinkSpec(fast), comp), throughput(p, LinkSpec(slow), comp)
    return {
        "raw32_fast": r_fast, "raw32_slow": r_slow, "raw32_ratio": r_fast / r_slow,
        "compressed_fast": c_fast, "compressed_slow": c_slow,
        "compressed_drop": 1.0 - c_slow / c_fast,
        "bits_fw": bits[0], "bits_bw": bits[1],
    }

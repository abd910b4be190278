import math

import pytest

from aqsgd import simnet
from aqsgd.simnet import Compression, LinkSpec, StageCost, epoch_time, transfer_time


def test_transfer_time_examples():
    assert transfer_time(0, LinkSpec(1e8)) == 0.0
    assert transfer_time(1_250_000, LinkSpec(1e8)) == pytest.approx(0.1, rel=1e-15)
    a, b = transfer_time(5000, LinkSpec(2e6, 0.01)), transfer_time(5000, LinkSpec(1e6, 0.01))
    assert (b - 0.01) == pytest.approx(2 * (a - 0.01), rel=1e-15)
    with pytest.raises(ValueError):
        transfer_time(-1, LinkSpec(1e6))


def test_link_and_cost_validation():
    with pytest.raises(ValueError):
        LinkSpec(0.0)
    with pytest.raises(ValueError):
        LinkSpec(1.0, -1.0)
    with pytest.raises(ValueError):
        StageCost(-1.0, 1.0)
    with pytest.raises(ValueError):
        Compression("fp16")
    with pytest.raises(ValueError):
        epoch_time(2, 4, [StageCost(1, 1)], LinkSpec(1e9), Compression())


def test_message_bytes():
    assert Compression().message_bytes(100, False) == 400
    assert Compression(simnet.AQSGD, 4, 8).message_bytes(100, False) == 58
    assert Compression(simnet.AQSGD, 4, 8).message_bytes(100, True) == 108
    assert Compression(simnet.DIRECTQ, 2, 2).message_bytes(0, True) == 0


def test_single_stage_is_pure_compute():
    t = epoch_time(1, 3, [StageCost(0.5, 1.0)], LinkSpec(1e3), Compression())
    assert t.seconds == pytest.approx(3 * 0.5 + 3 * 1.0) and t.samples == 3


def test_two_stage_hand_schedule():
    # forward line: [1, 0.5 transfer, 2], 2 micro-batches: 3.5 + 1*2 = 5.5
    # backward line: [2, 0.5 transfer, 1]: 3.5 + 2 = 5.5
    costs = [StageCost(1.0, 1.0, payload_dim=125_000), StageCost(2.0, 2.0)]
    t = epoch_time(2, 2, costs, LinkSpec(8e6), Compression())
    assert t.forward == pytest.approx(5.5) and t.backward == pytest.approx(5.5)
    assert t.samples_per_sec == pytest.approx(2 / 11)


def test_buffer_access_hidden_behind_compute():
    base = [StageCost(1.0, 1.0, payload_dim=10, fetch=0.5, store=0.5), StageCost(1.0, 1.0, fetch=0.5, store=0.5)]
    slow = [StageCost(1.0, 1.0, payload_dim=10, fetch=3.0, store=0.5), StageCost(1.0, 1.0, fetch=3.0, store=0.5)]
    link = LinkSpec(1e12)
    a = epoch_time(2, 4, base, link, Compression(simnet.AQSGD, 4, 4))
    d = epoch_time(2, 4, base, link, Compression(simnet.DIRECTQ, 4, 4))
    assert a.seconds == pytest.approx(d.seconds, rel=1e-9)
    assert epoch_time(2, 4, slow, link, Compression(simnet.AQSGD, 4, 4)).seconds > a.seconds


def test_infinite_bandwidth_limit_is_compression_independent():
    p = simnet.preset("gpt2xl-8stage")
    link = LinkSpec(1e20)
    raw = simnet.throughput(p, link, Compression())
    q = simnet.throughput(p, link, Compression(simnet.AQSGD, 4, 4))
    assert q == pytest.approx(raw, rel=1e-6)


def test_doubling_micro_batches_increases_time():
    p = simnet.preset("gpt2xl-8stage")
    for bw in (1e8, 1e10):
        a = epoch_time(p.K, p.micro_batches, p.costs, LinkSpec(bw), Compression())
        b = epoch_time(p.K, 2 * p.micro_batches, p.costs, LinkSpec(bw), Compression())
        assert b.seconds > a.seconds


def test_ratio_bands_and_monotonicity():
    p = simnet.preset("gpt2xl-8stage")
    bands = simnet.ratio_bands(p)
    assert bands["raw32_ratio"] >= 5.0 and bands["compressed_drop"] <= 0.25
    from aqsgd.verify import simnet_monotone

    grid = simnet.bandwidth_grid()
    assert len(grid) == 100 and grid[0] == pytest.approx(1e7) and grid[-1] == pytest.approx(1e11)
    assert simnet_monotone(p, grid) == (True, True)


def test_sweep_csv_and_unknown_preset():
    p = simnet.preset("gpt2xl-8stage")
    rows = simnet.sweep(p, [1e8, 1e9], [Compression(), Compression(simnet.AQSGD, 2, 4)])
    text = simnet.sweep_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(simnet.SWEEP_COLUMNS) and len(lines) == 5
    assert all(math.isfinite(r["samples_per_sec"]) for r in rows)
    with pytest.raises(ValueError):
        simnet.preset("nope")

import numpy as np

from aqsgd.numerics import RngStream
from aqsgd.quantize import IDENTITY, l2_spec, range_spec
from aqsgd.verify import (
    biased_roundtrip,
    identity_oracle,
    l2_bound_violations,
    run_suite,
    suite_quantizer,
    unbiasedness_violations,
)


def test_unbiasedness_helper_accepts_real_quantizers():
    x = RngStream(0, 5).normal(32)
    for spec in (l2_spec(2), range_spec(4), IDENTITY):
        bad, _ = unbiasedness_violations(spec, x, 4000, RngStream(1, 5))
        assert bad == 0


def test_biased_double_is_caught():
    rep = suite_quantizer(draws=4000, vectors=3, roundtrip=biased_roundtrip)
    assert not rep.passed
    x = RngStream(0, 5).normal(32)
    bad, _ = unbiasedness_violations(l2_spec(2), x, 4000, RngStream(1, 5), roundtrip=biased_roundtrip)
    assert bad > 0


def test_small_quantizer_suite_passes():
    assert suite_quantizer(draws=4000, vectors=3).passed


def test_l2_bound_helper():
    bad, worst = l2_bound_violations(500)
    assert bad == 0 and worst <= 1.0


def test_identity_oracle_short():
    assert identity_oracle(2, steps=100) and identity_oracle(4, steps=100)


def test_report_lines():
    rep = run_suite("simnet")
    assert rep.passed and all(line.startswith("[PASS] simnet/") for line in rep.lines())
    try:
        run_suite("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown suite accepted")

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aqsgd.constants import NoCertificateError
from aqsgd.numerics import RngStream
from aqsgd.quantize import (
    IDENTITY,
    PayloadFormatError,
    QuantizedPayload,
    Scheme,
    certified_cq,
    decode_payload,
    dequantize,
    empirical_cq,
    encode_payload,
    encoded_bytes,
    l2_spec,
    pack_codes,
    quantize,
    quantize_many,
    range_spec,
    rounding_profile,
    roundtrip_rows,
    unpack_codes,
)
from aqsgd.verify import biased_roundtrip, unbiasedness_violations

SPECS = [l2_spec(1), l2_spec(4), l2_spec(8), range_spec(1), range_spec(2), range_spec(4), range_spec(16)]
finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def Q(spec, x, seed=0):
    return dequantize(spec, quantize(spec, x, RngStream(seed, 1)))


@pytest.mark.parametrize("spec", SPECS + [IDENTITY])
def test_zero_vector_decodes_to_zero(spec):
    out = Q(spec, np.zeros(7))
    assert np.array_equal(out, np.zeros(7))


def test_identity_is_bitwise():
    x = RngStream(0, 2).normal(33)
    assert np.array_equal(Q(IDENTITY, x), x)


def test_grid_points_are_exact_l2():
    # normalized entries 0.6 and 0.8 are not on a k/2^b grid, but 0, 1 and 0.5 are
    spec = l2_spec(2)
    for x in (np.array([0.0, 1.0, 0.0]), np.array([0.5, 0.5, 0.5, -0.5])):
        assert np.array_equal(Q(spec, 3.0 * x), 3.0 * x)


def test_grid_points_are_exact_range():
    spec = range_spec(2)  # levels -1, -1/3, 1/3, 1 times scale
    x = 1.5 * np.array([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0])
    out = Q(spec, x)
    assert np.allclose(out, x, rtol=0, atol=1e-15)


def test_all_zero_codes_decode_to_minimum_level():
    s = 2.5
    p = QuantizedPayload(Scheme.RANGE_UNIFORM, 3, s, codes=np.zeros(4, dtype=np.uint32))
    assert np.array_equal(dequantize(range_spec(3), p), np.full(4, -s))
    p = QuantizedPayload(Scheme.L2_STOCHASTIC, 3, s, codes=np.zeros(4, dtype=np.uint32))
    assert np.array_equal(dequantize(l2_spec(3), p), np.full(4, -s))


def test_malformed_codes_rejected():
    with pytest.raises(PayloadFormatError):
        dequantize(range_spec(2), QuantizedPayload(Scheme.RANGE_UNIFORM, 2, 1.0, codes=np.array([4])))
    with pytest.raises(PayloadFormatError):
        dequantize(range_spec(2), QuantizedPayload(Scheme.RANGE_UNIFORM, 3, 1.0, codes=np.array([1])))
    with pytest.raises(PayloadFormatError):
        dequantize(range_spec(2), QuantizedPayload(Scheme.L2_STOCHASTIC, 2, 1.0, codes=np.array([1])))


def test_bits_range_checked():
    with pytest.raises(ValueError):
        range_spec(0)
    with pytest.raises(ValueError):
        l2_spec(17)


def test_unbiased_d16_b4():
    x = RngStream(1, 3).normal(16)
    for spec in (l2_spec(4), range_spec(4)):
        bad, _ = unbiasedness_violations(spec, x, 100_000, RngStream(2, 3))
        assert bad == 0


def test_biased_double_is_caught():
    x = RngStream(1, 3).normal(16)
    bad, worst = unbiasedness_violations(range_spec(4), x, 20_000, RngStream(2, 3), biased_roundtrip)
    assert bad > 0 and worst > 10


def test_l2_deterministic_bound_d16_b4():
    rng = RngStream(5, 5)
    X = rng.normal((10_000, 16))
    out = roundtrip_rows(l2_spec(4), X, rng)
    err = np.linalg.norm(X - out, axis=1)
    assert np.all(err <= 0.25 * np.linalg.norm(X, axis=1))


def test_range_per_coordinate_bound():
    rng = RngStream(6, 5)
    for b in (1, 2, 4, 8):
        X = rng.normal((2000, 12))
        out = roundtrip_rows(range_spec(b), X, rng)
        bound = 2.0 * np.max(np.abs(X), axis=1, keepdims=True) / (2**b - 1)
        assert np.all(np.abs(X - out) <= bound * (1 + 1e-12))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 24), elements=finite), st.integers(0, 2**32),
       st.sampled_from(SPECS), st.floats(1e-3, 1e3))
def test_scale_equivariance(x, seed, spec, c):
    p = quantize(spec, x, RngStream(seed, 1))
    pc = quantize(spec, c * x, RngStream(seed, 1))
    if p.scale == 0:
        assert pc.scale == 0
        return
    assert pc.scale == pytest.approx(c * p.scale, rel=1e-12)
    # codes agree except where floating rounding moved a position across a level boundary
    assert np.mean(pc.codes == p.codes) >= 0.9 or len(x) < 10
    assert np.all(np.abs(pc.codes.astype(int) - p.codes.astype(int)) <= 1)


def test_scale_equivariance_exact_for_power_of_two():
    x = RngStream(1, 1).normal(64)
    for spec in SPECS:
        p = quantize(spec, x, RngStream(9, 1))
        pc = quantize(spec, 4.0 * x, RngStream(9, 1))
        assert np.array_equal(p.codes, pc.codes) and pc.scale == 4.0 * p.scale


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=finite), st.integers(0, 2**32),
       st.integers(1, 10))
def test_l2_bound_property(x, seed, b):
    spec = l2_spec(b)
    out = Q(spec, x, seed)
    assert np.linalg.norm(x - out) <= certified_cq(spec, len(x)) * np.linalg.norm(x) * (1 + 1e-12) + 1e-300


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=finite), st.integers(0, 2**32),
       st.sampled_from(SPECS))
def test_wire_roundtrip(x, seed, spec):
    p = quantize(spec, x, RngStream(seed, 1))
    data = encode_payload(p)
    assert len(data) == encoded_bytes(spec, len(x))
    back = decode_payload(data, spec, len(x))
    assert np.array_equal(dequantize(spec, back), dequantize(spec, p))


def test_wire_layout_is_little_endian_lsb_first():
    p = QuantizedPayload(Scheme.RANGE_UNIFORM, 3, 1.0, codes=np.array([1, 2, 7], dtype=np.uint32))
    data = encode_payload(p)
    assert data[:8] == np.array([1.0], "<f8").tobytes()
    # codes 001,010,111 LSB first: bits 1,0,0, 0,1,0, 1,1,1 -> byte0 = 0b11010001, byte1 = 0b1
    assert data[8:] == bytes([0b11010001, 0b00000001])


def test_unpack_rejects_bad_length_and_padding():
    with pytest.raises(PayloadFormatError):
        unpack_codes(b"\x00", 4, 3)
    with pytest.raises(PayloadFormatError):
        unpack_codes(b"\x00\xf0", 4, 3)
    assert np.array_equal(unpack_codes(pack_codes(np.array([5, 9, 3]), 4), 4, 3), [5, 9, 3])


def test_decode_rejects_wrong_size():
    with pytest.raises(PayloadFormatError):
        decode_payload(b"\x00" * 5, range_spec(4), 4)


def test_encoded_bytes_examples():
    assert encoded_bytes(range_spec(4), 1024) == 520
    assert encoded_bytes(IDENTITY, 1024) == 8192
    assert encoded_bytes(range_spec(1), 1) == 9
    # the L2 grid has 2^(b+1)+1 levels, so its codes are b+2 bits wide
    assert encoded_bytes(l2_spec(4), 1024) == 768 + 8


def test_certified_cq():
    assert certified_cq(IDENTITY, 1000) == 0.0
    assert certified_cq(l2_spec(4), 16) == 0.25
    assert certified_cq(l2_spec(4), 16) < math.sqrt(0.5)
    with pytest.raises(NoCertificateError):
        certified_cq(range_spec(4), 16)


def test_empirical_cq_below_certified_for_l2():
    spec = l2_spec(4)
    assert empirical_cq(spec, 16, RngStream(0, 1), 500) <= certified_cq(spec, 16)
    assert empirical_cq(IDENTITY, 16, RngStream(0, 1)) == 0.0


def test_quantize_many_matches_sequential():
    X = RngStream(0, 4).normal((5, 6))
    many = quantize_many(range_spec(3), X, RngStream(1, 1))
    rng = RngStream(1, 1)
    for row, p in zip(X, many):
        q = quantize(range_spec(3), row, rng)
        assert np.array_equal(q.codes, p.codes) and q.scale == p.scale


def test_rounding_profile_matches_variance():
    x = RngStream(0, 4).normal(8)
    spec = range_spec(3)
    spacing, p = rounding_profile(spec, x)
    Qs = roundtrip_rows(spec, np.tile(x, (200_000, 1)), RngStream(3, 3))
    assert np.allclose(Qs.var(axis=0), spacing**2 * p * (1 - p), rtol=0.05, atol=1e-12)

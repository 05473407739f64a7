import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mxscale.errors import NonFiniteElement
from mxscale.minifloat import (
    E2M1,
    E2M3,
    E3M2,
    E4M3,
    E5M2,
    FORMATS,
    SpecialConvention,
    decode,
    decode_array,
    get_format,
    quantize,
    quantize_array,
    round_bf16,
)

from oracles import HAND_TABLES, bf16_round_oracle, brute_quantize

finite_floats = st.floats(allow_nan=False, allow_infinity=False, width=64)
fmt_strategy = st.sampled_from(FORMATS)


def same(a, b):
    if math.isnan(a) or math.isnan(b):
        return math.isnan(a) and math.isnan(b)
    return a == b and math.copysign(1, a) == math.copysign(1, b)


# Reference rows per format: (max normal, min subnormal, binades)
REFERENCE_ROWS = {
    "E4M3": (1.75 * 2**8, 2**-9, 17.8),
    "E5M2": (1.75 * 2**15, 2**-16, 31.8),
    "E2M3": (1.875 * 2**2, 2**-3, 5.9),
    "E3M2": (1.75 * 2**4, 2**-4, 8.8),  # bias 3 puts the smallest subnormal at 2**-4
    "E2M1": (1.5 * 2**2, 2**-1, 3.6),
}


@pytest.mark.parametrize("fmt", FORMATS, ids=str)
def test_format_descriptor_matches_reference_table(fmt):
    destmax, min_sub, binades = REFERENCE_ROWS[fmt.name]
    assert 1 + fmt.exp_bits + fmt.man_bits in (8, 6, 4)
    assert fmt.destmax == destmax
    assert fmt.min_subnormal == min_sub
    assert abs(fmt.binades - binades) < 0.05


def test_special_conventions():
    assert E5M2.special is SpecialConvention.IEEE
    assert E4M3.special is SpecialConvention.FINITE_ONLY_ONE_NAN
    assert all(f.special is SpecialConvention.FINITE_ONLY for f in (E2M3, E3M2, E2M1))


@pytest.mark.parametrize("fmt", FORMATS, ids=str)
def test_decode_matches_hand_table(fmt):
    table = HAND_TABLES[fmt.name]
    assert len(table) == 1 << fmt.width
    for code, expected in enumerate(table):
        assert same(decode(code, fmt), expected), hex(code)


def test_decode_examples():
    assert decode(0b0_1111_110, E4M3) == 448
    assert same(decode(0, E4M3), 0.0)
    assert decode(0b0_11_1, E2M1) == 6.0
    assert math.isnan(decode(0b1_1111_111, E4M3))
    assert math.isnan(decode(0b0_1111_111, E4M3))
    assert decode(0b0_11111_00, E5M2) == math.inf
    assert decode(0b1_11111_00, E5M2) == -math.inf
    assert math.isnan(decode(0b0_11111_01, E5M2))


def test_e4m3_single_nan_pattern_per_sign():
    nan_codes = [c for c in range(256) if math.isnan(decode(c, E4M3))]
    assert nan_codes == [0x7F, 0xFF]


@pytest.mark.parametrize("fmt", (E2M3, E3M2, E2M1), ids=str)
def test_narrow_formats_are_all_finite(fmt):
    assert np.all(np.isfinite(fmt.table))


@pytest.mark.parametrize("name,ml_name", [
    ("E4M3", "float8_e4m3fn"), ("E5M2", "float8_e5m2"), ("E2M3", "float6_e2m3fn"),
    ("E3M2", "float6_e3m2fn"), ("E2M1", "float4_e2m1fn"),
])
def test_decode_agrees_with_ml_dtypes(name, ml_name):
    ml_dtypes = pytest.importorskip("ml_dtypes")
    dtype = getattr(ml_dtypes, ml_name, None)
    if dtype is None:
        pytest.skip(f"ml_dtypes lacks {ml_name}")
    fmt = get_format(name)
    codes = np.arange(1 << fmt.width, dtype=np.uint8)
    theirs = codes.view(dtype).astype(np.float64)
    ours = decode_array(codes, fmt)
    np.testing.assert_array_equal(ours, theirs)


@pytest.mark.parametrize("fmt", FORMATS, ids=str)
def test_exhaustive_round_trip(fmt):
    for code in range(1 << fmt.width):
        v = decode(code, fmt)
        if math.isfinite(v):
            assert quantize(v, fmt) == code, hex(code)


def test_quantize_examples():
    assert decode(quantize(448, E4M3), E4M3) == 448
    assert quantize(10000, E4M3) == quantize(448, E4M3)
    assert quantize(-10000, E4M3) == quantize(-448, E4M3)
    # 21 sits halfway between 20 (mantissa 010) and 22 (mantissa 011)
    assert decode(quantize(21, E4M3), E4M3) == 20
    assert quantize(21, E4M3) == brute_quantize(21, "E4M3")
    assert quantize(0.30, E2M1) == brute_quantize(0.30, "E2M1")
    assert decode(quantize(0.30, E2M1), E2M1) == 0.5


def test_quantize_rejects_non_finite():
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(NonFiniteElement):
            quantize(bad, E4M3)
    with pytest.raises(NonFiniteElement):
        quantize_array(np.array([1.0, np.nan]), E5M2)


def test_negative_zero_preserved():
    assert quantize(-0.0, E4M3) == 0x80
    assert quantize(0.0, E4M3) == 0x00
    assert quantize(-1e-30, E2M1) == 0b1000


@pytest.mark.parametrize("fmt", FORMATS, ids=str)
def test_quantize_matches_brute_force_on_midpoints(fmt):
    """Every midpoint between neighbours, plus values just off each midpoint."""
    pos = sorted({v for v in fmt.table if math.isfinite(v) and v >= 0})
    probes = []
    for lo, hi in zip(pos, pos[1:]):
        mid = (lo + hi) / 2
        probes += [mid, math.nextafter(mid, 0), math.nextafter(mid, math.inf)]
    probes += [fmt.destmax * 1.01, fmt.destmax * 1e6, fmt.min_subnormal / 2,
               fmt.min_subnormal / 4, fmt.min_subnormal * 0.50000001]
    probes += [-p for p in probes]
    got = quantize_array(np.array(probes), fmt)
    for p, c in zip(probes, got):
        assert c == brute_quantize(p, fmt.name), (fmt.name, p)


@pytest.mark.parametrize("fmt", FORMATS, ids=str)
def test_quantize_matches_brute_force_random(fmt):
    rng = np.random.default_rng(1234)
    vals = rng.standard_normal(400) * fmt.destmax / 3
    vals = np.concatenate([vals, np.exp2(rng.uniform(-30, 20, 200)) * rng.choice([-1, 1], 200)])
    got = quantize_array(vals, fmt)
    for v, c in zip(vals, got):
        assert c == brute_quantize(float(v), fmt.name)


@settings(max_examples=300, deadline=None)
@given(fmt_strategy, finite_floats, finite_floats)
def test_monotonic(fmt, a, b):
    lo, hi = sorted((a, b))
    assert decode(quantize(lo, fmt), fmt) <= decode(quantize(hi, fmt), fmt)


@settings(max_examples=300, deadline=None)
@given(fmt_strategy, finite_floats)
def test_negation_symmetry(fmt, v):
    assert quantize(-v, fmt) == quantize(v, fmt) ^ fmt.sign_mask


@settings(max_examples=300, deadline=None)
@given(fmt_strategy, finite_floats)
def test_saturation_totality(fmt, v):
    assert abs(decode(quantize(v, fmt), fmt)) <= fmt.destmax


def test_samples_per_binade():
    def per_binade(fmt):
        pos = [v for v in fmt.table if math.isfinite(v) and v >= fmt.min_normal]
        counts = {}
        for v in pos:
            counts[math.floor(math.log2(v))] = counts.get(math.floor(math.log2(v)), 0) + 1
        return counts

    e4 = per_binade(E4M3)
    # the top E4M3 binade loses its last sample to the NaN pattern
    assert all(n == 8 for e, n in e4.items() if e < E4M3.emax)
    assert e4[E4M3.emax] == 7
    assert set(per_binade(E5M2).values()) == {4}


def test_nan_codes():
    assert math.isnan(decode(E4M3.nan_code, E4M3))
    assert math.isnan(decode(E5M2.nan_code, E5M2))
    assert E2M1.nan_code is None


def test_get_format():
    assert get_format("e4m3") is E4M3
    with pytest.raises(ValueError):
        get_format("e9m9")


# ---- BF16 ----------------------------------------------------------------


def test_round_bf16_examples():
    assert round_bf16(np.float32(1.0)) == 1.0
    assert round_bf16(np.float32(1 + 2**-9)) == 1.0
    assert bf16_round_oracle(float(np.float32(1 + 2**-9))) == 1.0
    assert round_bf16(np.float32(448)) == 448
    # tie at 1 + 2**-8: even neighbour is 1.0; at 1 + 3*2**-8 it is 1 + 2**-6... check oracle
    for x in (1 + 2**-8, 1 + 3 * 2**-8, -(1 + 2**-8)):
        assert round_bf16(np.float32(x)) == bf16_round_oracle(float(np.float32(x)))


def test_round_bf16_specials():
    out = round_bf16(np.array([np.nan, np.inf, -np.inf, 3.4e38, -0.0], dtype=np.float32))
    assert np.isnan(out[0])
    assert out[1] == np.inf and out[2] == -np.inf
    assert out[3] == np.inf  # above BF16 max + half ulp
    assert out[4] == 0 and np.signbit(out[4])


def test_round_bf16_matches_oracle_random():
    rng = np.random.default_rng(7)
    bits = rng.integers(0, 2**32, size=3000, dtype=np.uint64).astype(np.uint32)
    x = bits.view(np.float32)
    x = x[np.isfinite(x)]
    got = round_bf16(x)
    for v, g in zip(x, got):
        want = bf16_round_oracle(float(v))
        assert same(float(g), want), (float(v), float(g), want)


def test_round_bf16_agrees_with_ml_dtypes():
    ml_dtypes = pytest.importorskip("ml_dtypes")
    rng = np.random.default_rng(8)
    x = (rng.standard_normal(10000) * np.exp2(rng.integers(-60, 60, 10000))).astype(np.float32)
    np.testing.assert_array_equal(round_bf16(x), x.astype(ml_dtypes.bfloat16).astype(np.float32))

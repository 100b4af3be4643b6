import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapteq.numerics import FixedFormat, JonesWaveform, WordlengthProfile, fx_add, fx_mul, quantize

Q42 = FixedFormat(4, 2)


@pytest.mark.parametrize(
    "x, expected",
    [(0.25, 0.25), (0.30, 0.25), (2.70, 1.75), (-3.0, -2.0), (0.125, 0.0), (0.375, 0.5), (-0.125, 0.0)],
)
def test_quantize_examples(x, expected):
    assert quantize(x, Q42) == expected


def test_format_range():
    f = FixedFormat(14, 11)
    assert f.min_value == -4.0
    assert f.max_value == (2**13 - 1) * 2.0**-11
    assert f.step == 2.0**-11


@pytest.mark.parametrize("w, f", [(1, 0), (33, 0), (4, 4), (4, -1)])
def test_format_rejects_bad_fields(w, f):
    with pytest.raises(ValueError):
        FixedFormat(w, f)


def test_format_rejects_other_modes():
    with pytest.raises(ValueError):
        FixedFormat(8, 4, rounding="truncate")
    with pytest.raises(ValueError):
        FixedFormat(8, 4, overflow="wrap")


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_quantize_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        quantize(bad, Q42)
    with pytest.raises(ValueError):
        quantize(np.array([0.0, bad]), Q42)


def test_fx_add_examples():
    assert fx_add(0.25, 0.25, Q42) == 0.5
    assert fx_add(1.75, 0.25, Q42) == 1.75
    assert fx_add(0.3, 0.0, Q42) == quantize(0.3, Q42)


def test_fx_mul_examples():
    assert fx_mul(0.5, 0.5, FixedFormat(8, 6)) == 0.25
    assert fx_mul(0.3, 1.0, Q42) == quantize(0.3, Q42)
    # 0.3046875**2 = 0.09283..., nearest multiple of 0.25 is 0
    assert 0.3046875**2 == pytest.approx(0.0928344726)
    assert fx_mul(0.3046875, 0.3046875, Q42) == 0.0


def test_quantize_complex_per_component():
    z = quantize(np.array([0.3 - 2.7j]), Q42)
    assert z[0] == 0.25 - 2.0j


def test_quantize_array_shape_and_scalar_type():
    x = np.linspace(-3, 3, 24).reshape(2, 3, 4)
    assert quantize(x, Q42).shape == x.shape
    assert isinstance(quantize(0.3, Q42), float)


formats = st.builds(
    lambda w, f: FixedFormat(w, min(f, w - 1)), st.integers(2, 32), st.integers(0, 31)
)
reals = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=300, deadline=None)
@given(formats, reals)
def test_idempotent_and_representable(fmt, x):
    q = quantize(x, fmt)
    assert quantize(q, fmt) == q
    assert fmt.is_representable(q)
    assert fmt.min_value <= q <= fmt.max_value


@settings(max_examples=300, deadline=None)
@given(formats, st.floats(-1.0, 1.0))
def test_bounded_error_inside_range(fmt, u):
    x = fmt.min_value + (u + 1) / 2 * (fmt.max_value - fmt.min_value)
    assert abs(quantize(x, fmt) - x) <= 2.0 ** (-fmt.frac_bits - 1)


@settings(max_examples=300, deadline=None)
@given(formats, reals, reals)
def test_monotone(fmt, x, y):
    lo, hi = min(x, y), max(x, y)
    assert quantize(lo, fmt) <= quantize(hi, fmt)


def test_ties_to_even():
    f = FixedFormat(8, 0)
    assert [quantize(v, f) for v in (0.5, 1.5, 2.5, -0.5, -1.5)] == [0.0, 2.0, 2.0, -0.0, -2.0]


def test_default_profile():
    p = WordlengthProfile()
    assert p.wordlengths == (14, 16, 12, 14, 12)
    assert p.wl_signal.frac_bits == 11  # range +-4 for unit-power signals
    assert p.wl_adjoint.wordlength == p.wl_signal.wordlength
    assert WordlengthProfile.from_wordlengths((14, 16, 12, 14, 12)) == p


def test_profile_roundtrip_and_validation():
    p = WordlengthProfile.from_wordlengths((6, 8, 6, 6, 6))
    assert WordlengthProfile.from_dict(p.to_dict()) == p
    assert p.table().shape == (6, 3)
    with pytest.raises(ValueError):
        WordlengthProfile.from_wordlengths((14, 16, 12))


def test_jones_waveform():
    s = np.array([[1 + 1j, 0], [0, 2j]])
    w = JonesWaveform(s)
    assert len(w) == 2
    np.testing.assert_array_equal(w.norm2(), [2.0, 4.0])
    assert w.energy() == 6.0 and w.power() == 3.0
    assert w.sample_rate == 64e9
    with pytest.raises(ValueError):
        JonesWaveform(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        JonesWaveform(np.zeros((2, 4)), samples_per_symbol=4)

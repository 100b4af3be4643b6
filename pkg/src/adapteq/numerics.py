"""Fixed-point quantization model and Jones waveform container.

All fixed-point values are two's-complement with round-to-nearest-even and
saturation on overflow.  Values are carried as float64 that are exact
multiples of ``2**-frac_bits``; float64 represents every code of a format
with up to 32 bits exactly, so no integer codes are needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

__all__ = [
    "FixedFormat",
    "WordlengthProfile",
    "JonesWaveform",
    "quantize",
    "fx_add",
    "fx_mul",
    "SAMPLES_PER_SYMBOL",
]

SAMPLES_PER_SYMBOL = 2


@dataclass(frozen=True)
class FixedFormat:
    """Two's-complement fixed-point format.

    Parameters
    ----------
    wordlength : int
        Total number of bits including the sign bit, 2..32.
    frac_bits : int
        Number of fractional bits, ``0 <= frac_bits < wordlength``.
    """

    wordlength: int
    frac_bits: int
    rounding: str = "nearest-even"
    overflow: str = "saturate"

    def __post_init__(self):
        if not 2 <= self.wordlength <= 32:
            raise ValueError(f"wordlength must be in [2, 32], got {self.wordlength}")
        if not 0 <= self.frac_bits < self.wordlength:
            raise ValueError(
                f"frac_bits must be in [0, {self.wordlength}), got {self.frac_bits}"
            )
        if self.rounding != "nearest-even":
            raise ValueError(f"unsupported rounding mode {self.rounding!r}")
        if self.overflow != "saturate":
            raise ValueError(f"unsupported overflow mode {self.overflow!r}")

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return -(2.0 ** (self.wordlength - 1 - self.frac_bits))

    @property
    def max_value(self) -> float:
        return (2.0 ** (self.wordlength - 1) - 1) * self.step

    def row(self) -> np.ndarray:
        """(scale, lo_code, hi_code) as consumed by the jitted kernels."""
        return np.array(
            [2.0**self.frac_bits, -(2.0 ** (self.wordlength - 1)), 2.0 ** (self.wordlength - 1) - 1]
        )

    def is_representable(self, x) -> bool:
        x = np.asarray(x)
        if np.iscomplexobj(x):
            return self.is_representable(x.real) and self.is_representable(x.imag)
        scaled = x * 2.0**self.frac_bits
        return bool(
            np.all(scaled == np.round(scaled))
            and np.all(x >= self.min_value)
            and np.all(x <= self.max_value)
        )


def _fmt(wordlength: int, headroom_bits: int) -> FixedFormat:
    return FixedFormat(wordlength, wordlength - headroom_bits)


@dataclass(frozen=True)
class WordlengthProfile:
    """The five equalizer wordlengths plus the binary-point choices.

    ``wl_signal`` covers forward samples; ``wl_adjoint`` shares its
    wordlength and carries the backward signals with a binary point suited to
    their smaller magnitude.  Gradient-layer outputs use ``wl_taps``.
    """

    wl_signal: FixedFormat = field(default_factory=lambda: _fmt(14, 3))
    wl_gamma: FixedFormat = field(default_factory=lambda: _fmt(16, 3))
    wl_kerr_angle: FixedFormat = field(default_factory=lambda: _fmt(12, 5))
    wl_taps: FixedFormat = field(default_factory=lambda: _fmt(14, 2))
    wl_mf: FixedFormat = field(default_factory=lambda: _fmt(12, 1))
    wl_adjoint: FixedFormat | None = None

    def __post_init__(self):
        if self.wl_adjoint is None:
            object.__setattr__(self, "wl_adjoint", _fmt(self.wl_signal.wordlength, 1))

    @classmethod
    def from_wordlengths(cls, wls) -> "WordlengthProfile":
        """Build a profile from five total wordlengths (i)..(v) with default binary points."""
        wls = [int(w) for w in wls]
        if len(wls) != 5:
            raise ValueError(f"expected 5 wordlengths, got {len(wls)}")
        sig, gam, ang, taps, mf = wls
        return cls(
            wl_signal=_fmt(sig, min(3, sig - 1)),
            wl_gamma=_fmt(gam, min(3, gam - 1)),
            wl_kerr_angle=_fmt(ang, min(5, ang - 1)),
            wl_taps=_fmt(taps, min(2, taps - 1)),
            wl_mf=_fmt(mf, 1),
            wl_adjoint=_fmt(sig, 1),
        )

    @property
    def wordlengths(self) -> tuple[int, int, int, int, int]:
        return (
            self.wl_signal.wordlength,
            self.wl_gamma.wordlength,
            self.wl_kerr_angle.wordlength,
            self.wl_taps.wordlength,
            self.wl_mf.wordlength,
        )

    def table(self) -> np.ndarray:
        """Format table for the kernels; row order matches the ``Q_*`` indices."""
        return np.stack(
            [
                self.wl_signal.row(),
                self.wl_gamma.row(),
                self.wl_kerr_angle.row(),
                self.wl_taps.row(),
                self.wl_mf.row(),
                self.wl_adjoint.row(),
            ]
        )

    def to_dict(self) -> dict:
        names = ["wl_signal", "wl_gamma", "wl_kerr_angle", "wl_taps", "wl_mf", "wl_adjoint"]
        return {
            n: {"wordlength": getattr(self, n).wordlength, "frac_bits": getattr(self, n).frac_bits}
            for n in names
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WordlengthProfile":
        return cls(**{k: FixedFormat(v["wordlength"], v["frac_bits"]) for k, v in d.items()})


# Row indices into WordlengthProfile.table().
Q_SIGNAL, Q_GAMMA, Q_ANGLE, Q_TAPS, Q_MF, Q_ADJ = range(6)


@njit(cache=True, inline="always")
def qk(x, fmt_row):
    """Scalar quantizer used inside kernels; ``fmt_row`` = (scale, lo, hi)."""
    c = np.rint(x * fmt_row[0])
    if c < fmt_row[1]:
        c = fmt_row[1]
    elif c > fmt_row[2]:
        c = fmt_row[2]
    return c / fmt_row[0]


@njit(cache=True, inline="always")
def qck(z, fmt_row):
    return complex(qk(z.real, fmt_row), qk(z.imag, fmt_row))


def quantize(x, fmt: FixedFormat):
    """Round ``x`` to the nearest code of ``fmt`` (ties to even), saturating.

    Accepts scalars or arrays; complex inputs are quantized per component.
    """
    arr = np.asarray(x)
    if np.iscomplexobj(arr):
        return quantize(arr.real, fmt) + 1j * quantize(arr.imag, fmt)
    arr = arr.astype(float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot quantize non-finite value")
    scale = 2.0**fmt.frac_bits
    codes = np.clip(np.rint(arr * scale), -(2.0 ** (fmt.wordlength - 1)), 2.0 ** (fmt.wordlength - 1) - 1)
    out = codes / scale
    return float(out) if out.ndim == 0 else out


def fx_add(a, b, fmt: FixedFormat):
    """Saturating fixed-point addition."""
    return quantize(np.add(a, b), fmt)


def fx_mul(a, b, fmt_out: FixedFormat):
    """Full-precision product rounded to ``fmt_out``."""
    return quantize(np.multiply(a, b), fmt_out)


@dataclass
class JonesWaveform:
    """Dual-polarization complex baseband samples, shape ``(2, n)``.

    Row 0 is the x polarization and row 1 the y polarization.
    """

    samples: np.ndarray
    samples_per_symbol: int = SAMPLES_PER_SYMBOL
    baud: float = 32e9

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.complex128)
        if s.ndim != 2 or s.shape[0] != 2:
            raise ValueError(f"samples must have shape (2, n), got {s.shape}")
        if self.samples_per_symbol != SAMPLES_PER_SYMBOL:
            raise ValueError("only 2 samples/symbol is supported")
        self.samples = s

    def __len__(self) -> int:
        return self.samples.shape[1]

    @property
    def sample_rate(self) -> float:
        return self.samples_per_symbol * self.baud

    def norm2(self) -> np.ndarray:
        """Per-sample squared Jones norm |x|^2 + |y|^2."""
        s = self.samples
        return s.real[0] ** 2 + s.imag[0] ** 2 + s.real[1] ** 2 + s.imag[1] ** 2

    def energy(self) -> float:
        return float(np.sum(self.norm2()))

    def power(self) -> float:
        """Average total power over both polarizations."""
        return float(np.mean(self.norm2()))

    def replace(self, samples: np.ndarray) -> "JonesWaveform":
        return JonesWaveform(samples, self.samples_per_symbol, self.baud)

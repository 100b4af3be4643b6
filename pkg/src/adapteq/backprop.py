"""Hand-derived gradient backpropagation and the SGD update.

Real and imaginary parts are independent real variables; an adjoint is
stored as the complex number dL/dRe + j*dL/dIm.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels as K
from .equalizer import (
    EqualizerState,
    ForwardTape,
    KerrStepParams,
    LinearStepParams,
    MatchedFilterParams,
    _qt,
)
from .numerics import WordlengthProfile, quantize

__all__ = [
    "ShiftDivisor",
    "TaylorConfig",
    "BackwardOptions",
    "loss_and_adjoint",
    "mf_backward",
    "kerr_backward",
    "linear_backward",
    "backward",
    "sgd_update",
    "DivergenceError",
]


class DivergenceError(ArithmeticError):
    """Raised when a loss or gradient becomes non-finite."""

    def __init__(self, msg, batch_index=None):
        super().__init__(msg)
        self.batch_index = batch_index


@dataclass(frozen=True)
class ShiftDivisor:
    """Approximate 1/B as a sum of right shifts sum(2**-n)."""

    shifts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "shifts", tuple(sorted(int(n) for n in self.shifts)))
        if not self.shifts or any(n < 0 for n in self.shifts):
            raise ValueError("shifts must be a non-empty list of non-negative integers")

    @property
    def value(self) -> float:
        return float(sum(2.0**-n for n in self.shifts))

    def relative_error(self, batch_size: int) -> float:
        return self.value * batch_size - 1.0

    @classmethod
    def search(cls, batch_size: int, max_terms: int = 4, max_shift: int = 15) -> "ShiftDivisor":
        return cls(_search_shifts(batch_size, max_terms, max_shift))


@lru_cache(maxsize=None)
def _search_shifts(batch_size: int, max_terms: int, max_shift: int) -> tuple[int, ...]:
    """Exhaustive search; ties go to fewer shifts."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    target = 1.0 / batch_size
    best = None
    for m in range(1, max_terms + 1):
        for combo in itertools.combinations(range(max_shift + 1), m):
            err = abs(sum(2.0**-n for n in combo) - target)
            if best is None or err < best[0]:
                best = (err, combo)
    return best[1]


@dataclass(frozen=True)
class TaylorConfig:
    """Truncated-series evaluation of cos/sin inside the Kerr backward pass."""

    order: int = 3
    enabled: bool = False

    def __post_init__(self):
        if not 1 <= self.order <= 5:
            raise ValueError("Taylor order must be in [1, 5]")

    @property
    def kernel_order(self) -> int:
        return self.order if self.enabled else 0


@dataclass(frozen=True)
class BackwardOptions:
    taylor: TaylorConfig = field(default_factory=TaylorConfig)
    profile: WordlengthProfile | None = None
    kerr_sign: float = 1.0


def _divisor_value(batch_size: int, divisor) -> float:
    if divisor is None or divisor == "exact":
        return 1.0 / batch_size
    if divisor == "shift":
        return ShiftDivisor.search(batch_size).value
    return divisor.value


def loss_and_adjoint(y, x, batch_size: int | None = None, divisor=None, profile=None):
    """MSE over a batch and its adjoint w.r.t. the symbol estimates.

    ``divisor`` is ``None``/``"exact"``, ``"shift"`` (search for B) or a
    :class:`ShiftDivisor`; it replaces every 1/B factor.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.complex128))
    x = np.atleast_2d(np.asarray(x, dtype=np.complex128))
    if y.shape != x.shape:
        raise ValueError(f"estimate/pilot shape mismatch: {y.shape} vs {x.shape}")
    B = y.shape[1] if batch_size is None else batch_size
    if y.shape[1] != B:
        raise ValueError(f"expected {B} symbols, got {y.shape[1]}")
    qt, quant = _qt(profile)
    dy = np.zeros_like(y)
    loss = K.loss_adjoint(np.ascontiguousarray(y), np.ascontiguousarray(x), B, _divisor_value(B, divisor), dy, qt, quant)
    return float(loss), dy


def mf_backward(dy, p: MatchedFilterParams, profile: WordlengthProfile | None = None):
    """Transpose of :func:`equalizer.mf_forward` (phase 0 window)."""
    dy = np.ascontiguousarray(np.atleast_2d(dy), dtype=np.complex128)
    nsym = dy.shape[1]
    M = p.taps.size
    h = p.taps if profile is None else quantize(p.taps, profile.wl_mf)
    qt, quant = _qt(profile)
    dx = np.zeros((2, 2 * (nsym - 1) + M), dtype=np.complex128)
    K.mf_bwd(dy, np.asarray(h, dtype=float), nsym, dx, dx.shape[1], qt, quant)
    return dx


def kerr_backward(du, u, phi, p: KerrStepParams, taylor: TaylorConfig | None = None,
                  profile: WordlengthProfile | None = None, v=None, kerr_sign: float = 1.0):
    """Adjoint of a Kerr step at the taped input ``u`` with angles ``phi``.

    ``v`` is the taped output; when omitted it is rebuilt as u*exp(j*phi).
    ``kerr_sign = -1`` corrupts the power-coupling term (fault injection).
    """
    du = np.ascontiguousarray(du, dtype=np.complex128)
    u = np.ascontiguousarray(u, dtype=np.complex128)
    phi = np.ascontiguousarray(phi, dtype=float)
    if du.shape != u.shape or phi.shape != (u.shape[1],):
        raise ValueError("tape and adjoint shapes do not match")
    if v is None:
        v = u * np.exp(1j * phi)
    v = np.ascontiguousarray(v, dtype=np.complex128)
    gam = p.coefficient if profile is None else quantize(p.coefficient, profile.wl_gamma)
    qt, quant = _qt(profile)
    order = 0 if taylor is None else taylor.kernel_order
    out = np.zeros_like(u)
    K.kerr_bwd(du, u.shape[1], u, v, phi, float(gam), out, order, float(kerr_sign), qt, quant)
    return out


def linear_backward(dx_out, x_in, p: LinearStepParams, profile: WordlengthProfile | None = None):
    """Returns ``(dx_in, grad)`` for a valid-mode MIMO-FIR step."""
    dx_out = np.ascontiguousarray(dx_out, dtype=np.complex128)
    x_in = np.ascontiguousarray(x_in, dtype=np.complex128)
    T = p.taps.shape[2]
    if x_in.shape[1] != dx_out.shape[1] + T - 1:
        raise ValueError("tape input length must equal adjoint length + T - 1")
    taps = p.taps if profile is None else quantize(p.taps, profile.wl_taps)
    qt, quant = _qt(profile)
    dx_in = np.zeros_like(x_in)
    g = np.zeros((2, 2, T))
    K.linear_bwd(dx_out, dx_out.shape[1], x_in, np.ascontiguousarray(taps), dx_in, g, True, qt, quant)
    return dx_in, g


def backward(tape: ForwardTape, dy, s: EqualizerState, opts: BackwardOptions | None = None):
    """Gradient of the batch loss w.r.t. all linear taps, shape (3, 2, 2, T)."""
    opts = opts or BackwardOptions()
    profile = opts.profile if opts.profile is not None else tape.profile
    dy = np.ascontiguousarray(dy, dtype=np.complex128)
    if dy.shape != tape.symbols.shape:
        raise ValueError("adjoint does not match the taped symbols")
    qt, quant = _qt(profile)
    taps, gams, h = s.kernel_params(profile)
    tp, lengths, phis = tape.kernel_arrays()
    n0 = tp.shape[2]
    grads = np.zeros_like(taps)
    adj_a = np.zeros((2, n0), dtype=np.complex128)
    adj_b = np.zeros((2, n0), dtype=np.complex128)
    K.backward_window(dy, dy.shape[1], tape.kinds, tape.pidx, taps, gams, h, tp, lengths, phis,
                      adj_a, adj_b, grads, opts.taylor.kernel_order, opts.kerr_sign, qt, quant)
    return grads


def sgd_update(s: EqualizerState, g, xi: float, profile: WordlengthProfile | None = None) -> EqualizerState:
    """taps <- taps - xi*g, re-quantized to the tap format in quantized mode."""
    g = np.asarray(g, dtype=float)
    if xi < 0:
        raise ValueError("learning rate must be non-negative")
    if g.shape != s.linear_taps.shape:
        raise ValueError("gradient shape does not match the taps")
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient")
    qt, quant = _qt(profile)
    taps = np.array(s.linear_taps)
    if quant:
        taps = quantize(taps, profile.wl_taps)
    K.sgd_apply(taps, g, float(xi), qt, quant)
    return s.with_taps(taps)

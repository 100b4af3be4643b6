"""Forward propagation of the split-step equalizer.

Three trainable real 2x2 MIMO-FIR steps alternate with fixed Kerr phase
steps, followed by a fixed RRC matched filter and 2:1 decimation.  The
equalizer works on power-normalized samples: the received field is divided
by ``sqrt(input_power_w)`` at the input, so each Kerr step applies the phase
``gamma_bar * input_power_w * |u|^2``.

Filters use "valid" convolutions over a window; a symbol only depends on the
``half_window`` samples on either side of its centre, so evaluating any
window reproduces the continuous-stream output exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .channel import rrc_taps
from .numerics import JonesWaveform, WordlengthProfile, quantize

__all__ = [
    "LinearStepParams",
    "KerrStepParams",
    "MatchedFilterParams",
    "EqualizerState",
    "ForwardTape",
    "linear_step_forward",
    "kerr_step_forward",
    "mf_forward",
    "equalizer_forward",
    "select_decimation_phase",
    "save_state",
    "load_state",
]

N_STEPS = 3
DEFAULT_TAPS = 5
_DUMMY_QT = np.zeros((6, 3))


def _qt(profile: WordlengthProfile | None):
    return (_DUMMY_QT, False) if profile is None else (profile.table(), True)


@dataclass(frozen=True)
class LinearStepParams:
    """Real 2x2xT MIMO-FIR taps shared by the real and imaginary parts."""

    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=float)
        if taps.ndim != 3 or taps.shape[:2] != (2, 2) or taps.shape[2] % 2 == 0:
            raise ValueError(f"taps must have shape (2, 2, odd T), got {taps.shape}")
        object.__setattr__(self, "taps", taps)

    @classmethod
    def identity(cls, n_taps: int = DEFAULT_TAPS) -> "LinearStepParams":
        taps = np.zeros((2, 2, n_taps))
        taps[0, 0, n_taps // 2] = taps[1, 1, n_taps // 2] = 1.0
        return cls(taps)


@dataclass(frozen=True)
class KerrStepParams:
    """Fixed Kerr step; ``power_scale`` is the physical power (W) of one unit of |u|^2."""

    gamma_bar: float
    power_scale: float = 1.0

    def __post_init__(self):
        if self.gamma_bar < 0:
            raise ValueError("gamma_bar must be non-negative")

    @property
    def coefficient(self) -> float:
        return self.gamma_bar * self.power_scale


@dataclass(frozen=True)
class MatchedFilterParams:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=float)
        if taps.ndim != 1 or taps.size % 2 == 0:
            raise ValueError("matched filter needs an odd number of taps")
        object.__setattr__(self, "taps", taps)

    @classmethod
    def rrc(cls, rolloff: float = 0.1) -> "MatchedFilterParams":
        return cls(rrc_taps(rolloff))


@dataclass(frozen=True)
class EqualizerState:
    """Trainable taps plus the fixed Kerr and matched-filter parameters.

    Attributes
    ----------
    linear_taps : ndarray, shape (3, 2, 2, T)
    gamma_bar : ndarray, shape (3,)
        Per-step Kerr coefficient in rad/W.
    mf_taps : ndarray
    layer_order : {"kerr_first", "linear_first"}
    input_power_w : float
        Received power that maps to unit normalized power.
    phase : int
        Decimation phase (0 or 1) of the matched-filter output.
    """

    linear_taps: np.ndarray
    gamma_bar: np.ndarray
    mf_taps: np.ndarray = field(default_factory=lambda: rrc_taps(0.1))
    layer_order: str = "kerr_first"
    input_power_w: float = 1.0
    phase: int = 0

    def __post_init__(self):
        taps = np.array(self.linear_taps, dtype=float)
        if taps.ndim != 4 or taps.shape[0] != N_STEPS or taps.shape[1:3] != (2, 2) or taps.shape[3] % 2 == 0:
            raise ValueError(f"linear_taps must have shape (3, 2, 2, odd T), got {taps.shape}")
        gam = np.array(self.gamma_bar, dtype=float).reshape(-1)
        if gam.shape != (N_STEPS,) or np.any(gam < 0):
            raise ValueError("gamma_bar must hold 3 non-negative values")
        if self.layer_order not in ("kerr_first", "linear_first"):
            raise ValueError(f"unknown layer order {self.layer_order!r}")
        if self.phase not in (0, 1):
            raise ValueError("phase must be 0 or 1")
        if self.input_power_w <= 0:
            raise ValueError("input_power_w must be positive")
        mf = np.array(self.mf_taps, dtype=float)
        if mf.ndim != 1 or mf.size % 2 == 0:
            raise ValueError("matched filter needs an odd number of taps")
        for name, arr in (("linear_taps", taps), ("gamma_bar", gam), ("mf_taps", mf)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_taps(self) -> int:
        return self.linear_taps.shape[3]

    @property
    def n_trainable(self) -> int:
        return self.linear_taps.size

    @property
    def linear_steps(self) -> tuple[LinearStepParams, ...]:
        return tuple(LinearStepParams(t) for t in self.linear_taps)

    @property
    def kerr_steps(self) -> tuple[KerrStepParams, ...]:
        return tuple(KerrStepParams(float(g), self.input_power_w) for g in self.gamma_bar)

    @property
    def mf(self) -> MatchedFilterParams:
        return MatchedFilterParams(self.mf_taps)

    @property
    def half_window(self) -> int:
        """Samples on each side of a symbol centre that influence it."""
        return (self.mf_taps.size - 1) // 2 + N_STEPS * (self.n_taps - 1) // 2

    def layers(self):
        """Layer kinds and parameter indices in forward order, as kernel arrays."""
        if self.layer_order == "kerr_first":
            kinds = [K.KERR, K.LINEAR] * N_STEPS
        else:
            kinds = [K.LINEAR, K.KERR] * N_STEPS
        pidx = [i // 2 for i in range(2 * N_STEPS)]
        return np.array(kinds, dtype=np.int64), np.array(pidx, dtype=np.int64)

    def kernel_params(self, profile: WordlengthProfile | None):
        """Taps, Kerr coefficients and MF taps as seen by the datapath."""
        taps = np.ascontiguousarray(self.linear_taps, dtype=float).copy()
        gams = self.gamma_bar * self.input_power_w
        h = self.mf_taps.copy()
        if profile is not None:
            taps = quantize(taps, profile.wl_taps)
            gams = quantize(gams, profile.wl_gamma)
            h = quantize(h, profile.wl_mf)
        return taps, np.asarray(gams, dtype=float), np.asarray(h, dtype=float)

    def with_taps(self, taps) -> "EqualizerState":
        return replace(self, linear_taps=np.asarray(taps, dtype=float))

    def quantized(self, profile: WordlengthProfile) -> "EqualizerState":
        return self.with_taps(quantize(self.linear_taps, profile.wl_taps))


@dataclass(frozen=True)
class ForwardTape:
    """Intermediates recorded by :func:`equalizer_forward`.

    ``signals[l]`` is the (power-normalized, possibly quantized) input of
    layer ``l`` and ``signals[-1]`` the matched-filter input.  ``phis[i]``
    holds the Kerr angles of step ``i`` over that step's input window.
    """

    signals: tuple
    phis: np.ndarray
    kinds: np.ndarray
    pidx: np.ndarray
    symbols: np.ndarray
    first_symbol: int
    profile: WordlengthProfile | None = None

    def __post_init__(self):
        for s in self.signals:
            s.setflags(write=False)
        self.phis.setflags(write=False)
        self.symbols.setflags(write=False)

    @property
    def n_symbols(self) -> int:
        return self.symbols.shape[1]

    def kerr_norm2(self, step: int) -> np.ndarray:
        l = [i for i in range(len(self.kinds)) if self.kinds[i] == K.KERR and self.pidx[i] == step][0]
        u = self.signals[l]
        return np.sum(u.real**2 + u.imag**2, axis=0)

    def kernel_arrays(self):
        n0 = self.signals[0].shape[1]
        tape = np.zeros((len(self.signals), 2, n0), dtype=np.complex128)
        lengths = np.zeros(len(self.signals), dtype=np.int64)
        for l, s in enumerate(self.signals):
            tape[l, :, : s.shape[1]] = s
            lengths[l] = s.shape[1]
        return tape, lengths, np.ascontiguousarray(self.phis)


def _as_array(x):
    return x.samples if isinstance(x, JonesWaveform) else np.asarray(x, dtype=np.complex128)


def linear_step_forward(x, p: LinearStepParams, profile: WordlengthProfile | None = None):
    """Valid-mode MIMO-FIR: output ``n`` is centred on input ``n + (T-1)//2``.

    Returns an array (or waveform, if given one) that is ``T-1`` samples shorter.
    """
    arr = _as_array(x)
    T = p.taps.shape[2]
    if arr.shape[1] <= T - 1:
        raise ValueError("input must be longer than the filter")
    qt, quant = _qt(profile)
    taps = p.taps if profile is None else quantize(p.taps, profile.wl_taps)
    out = np.zeros((2, arr.shape[1] - T + 1), dtype=np.complex128)
    K.linear_fwd(np.ascontiguousarray(arr), arr.shape[1], np.ascontiguousarray(taps), out, qt, quant)
    return x.replace(out) if isinstance(x, JonesWaveform) else out


def kerr_step_forward(x, p: KerrStepParams, profile: WordlengthProfile | None = None):
    """Apply u*exp(+j*phi), phi = coefficient*|u|^2.

    Returns ``(output, norm2, phi)``.
    """
    arr = np.ascontiguousarray(_as_array(x))
    qt, quant = _qt(profile)
    gam = p.coefficient if profile is None else quantize(p.coefficient, profile.wl_gamma)
    out = np.zeros_like(arr)
    phi = np.zeros(arr.shape[1])
    K.kerr_fwd(arr, arr.shape[1], float(gam), out, phi, qt, quant)
    norm2 = np.sum(arr.real**2 + arr.imag**2, axis=0)
    return (x.replace(out) if isinstance(x, JonesWaveform) else out), norm2, phi


def mf_forward(x, p: MatchedFilterParams, profile: WordlengthProfile | None = None, phase: int = 0):
    """Matched filter plus decimation.

    Symbol ``j`` is centred on input sample ``2*j + phase + (M-1)//2``.
    """
    arr = _as_array(x)
    M = p.taps.size
    n_avail = arr.shape[1] - phase
    if n_avail < M:
        raise ValueError("waveform shorter than the matched filter")
    nsym = (n_avail - M) // 2 + 1
    qt, quant = _qt(profile)
    h = p.taps if profile is None else quantize(p.taps, profile.wl_mf)
    y = np.zeros((2, nsym), dtype=np.complex128)
    K.mf_fwd(np.ascontiguousarray(arr[:, phase:]), np.ascontiguousarray(h, dtype=float), nsym, y, qt, quant)
    return y


def symbol_range(n_samples: int, state: EqualizerState) -> tuple[int, int]:
    """First symbol and symbol count whose full receptive field lies in the stream."""
    hw, ph = state.half_window, state.phase
    first = max(0, -(-(hw - ph) // 2))
    last = (n_samples - 1 - hw - ph) // 2
    return first, max(0, last - first + 1)


def equalizer_forward(
    x,
    s: EqualizerState,
    profile: WordlengthProfile | None = None,
    *,
    first_symbol: int | None = None,
    n_symbols: int | None = None,
):
    """Run the full forward path on a received waveform.

    ``x`` is in physical units (sqrt(W)); it is normalized by
    ``sqrt(s.input_power_w)`` and, in quantized mode, rounded to the signal
    format.  Symbol ``k`` is centred on input sample ``2*k + s.phase``.

    Returns
    -------
    symbols : ndarray, shape (2, n)
    tape : ForwardTape
    """
    arr = np.ascontiguousarray(_as_array(x))
    lo, count = symbol_range(arr.shape[1], s)
    if first_symbol is None:
        first_symbol = lo
    if n_symbols is None:
        n_symbols = lo + count - first_symbol
    if first_symbol < lo or n_symbols <= 0 or first_symbol + n_symbols > lo + count:
        raise ValueError("requested symbols fall outside the usable part of the waveform")
    qt, quant = _qt(profile)
    taps, gams, h = s.kernel_params(profile)
    kinds, pidx = s.layers()
    n0 = 2 * (n_symbols - 1) + h.size + N_STEPS * (s.n_taps - 1)
    start = 2 * first_symbol + s.phase - s.half_window
    x0 = np.zeros((2, n0), dtype=np.complex128)
    K.normalize_input(arr, start, n0, 1.0 / np.sqrt(s.input_power_w), x0, qt, quant)
    tape = np.zeros((len(kinds) + 1, 2, n0), dtype=np.complex128)
    lengths = np.zeros(len(kinds) + 1, dtype=np.int64)
    phis = np.zeros((N_STEPS, n0))
    y = np.zeros((2, n_symbols), dtype=np.complex128)
    K.forward_window(x0, n0, kinds, pidx, taps, gams, h, n_symbols, tape, lengths, phis, y, qt, quant)
    signals = tuple(tape[l, :, : lengths[l]].copy() for l in range(len(kinds) + 1))
    kerr_len = {int(pidx[l]): int(lengths[l]) for l in range(len(kinds)) if kinds[l] == K.KERR}
    phis_out = np.zeros_like(phis)
    for i, n in kerr_len.items():
        phis_out[i, :n] = phis[i, :n]
    return y, ForwardTape(signals, phis_out, kinds, pidx, y.copy(), first_symbol, profile)


def select_decimation_phase(x, s: EqualizerState, n_symbols: int = 2048) -> int:
    """Pick the decimation phase with the larger mean matched-filter output power."""
    powers = []
    for ph in (0, 1):
        st = replace(s, phase=ph)
        lo, count = symbol_range(len(x) if isinstance(x, JonesWaveform) else np.shape(x)[1], st)
        y, _ = equalizer_forward(x, st, first_symbol=lo, n_symbols=min(count, n_symbols))
        powers.append(float(np.mean(np.abs(y) ** 2)))
    return int(np.argmax(powers))


STATE_FORMAT_VERSION = 1


def save_state(path, s: EqualizerState, profile: WordlengthProfile | None = None) -> None:
    """Write the state as JSON.

    Keys: ``format_version``, ``layer_order``, ``input_power_w``, ``phase``,
    ``gamma_bar`` (3 values, rad/W), ``mf_taps``, ``linear.<step>.<a><b>``
    (T values each; step 0..2, a = output and b = input polarization),
    ``wordlengths`` (profile dict or null).
    """
    doc = {
        "format_version": STATE_FORMAT_VERSION,
        "layer_order": s.layer_order,
        "input_power_w": s.input_power_w,
        "phase": s.phase,
        "gamma_bar": s.gamma_bar.tolist(),
        "mf_taps": s.mf_taps.tolist(),
    }
    for k in range(N_STEPS):
        for a in range(2):
            for b in range(2):
                doc[f"linear.{k}.{a}{b}"] = s.linear_taps[k, a, b].tolist()
    doc["wordlengths"] = None if profile is None else profile.to_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_state(path) -> tuple[EqualizerState, WordlengthProfile | None]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != STATE_FORMAT_VERSION:
        raise ValueError("unsupported state file version")
    n_taps = len(doc["linear.0.00"])
    taps = np.zeros((N_STEPS, 2, 2, n_taps))
    for k in range(N_STEPS):
        for a in range(2):
            for b in range(2):
                taps[k, a, b] = doc[f"linear.{k}.{a}{b}"]
    state = EqualizerState(
        linear_taps=taps,
        gamma_bar=doc["gamma_bar"],
        mf_taps=doc["mf_taps"],
        layer_order=doc["layer_order"],
        input_power_w=doc["input_power_w"],
        phase=doc["phase"],
    )
    wl = doc.get("wordlengths")
    return state, (None if wl is None else WordlengthProfile.from_dict(wl))

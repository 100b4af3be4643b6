"""Dual-polarization fiber channel emulator.

PM-QPSK symbols are RRC-shaped at 2 samples/symbol and sent through a
cascade of lumped spans (polarization rotation, differential group delay,
Kerr phase), a final rotation, additive white Gaussian noise and a
brick-wall receiver filter.  Everything runs in float64; the channel is
test equipment, never quantized.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import SAMPLES_PER_SYMBOL, JonesWaveform

__all__ = [
    "SpanConfig",
    "ChannelConfig",
    "PilotBlock",
    "GUARD_SAMPLES",
    "NOISE_REF_BANDWIDTH_HZ",
    "PMD_PARAMETER",
    "rrc_taps",
    "frequency_grid",
    "generate_symbols",
    "pulse_shape",
    "apply_rotation",
    "apply_dgd",
    "apply_kerr",
    "add_noise",
    "lowpass",
    "run_channel",
    "kerr_gamma_bar",
    "dbm_to_watt",
    "write_jwav",
    "read_jwav",
]

PMD_PARAMETER = 0.2e-12  # s/sqrt(km)
# Bandwidth in which the noise power is specified.  Calibrated so that the
# default channel lands on the reported operating point at 10 dBm.
NOISE_REF_BANDWIDTH_HZ = 400e9
GUARD_SAMPLES = 256
RRC_SPAN_SYMBOLS = 16


def dbm_to_watt(p_dbm: float) -> float:
    return 10.0 ** (p_dbm / 10.0) * 1e-3


def default_tau(length_km: float, pmd: float = PMD_PARAMETER) -> float:
    """Per-span DGD tau * sqrt(3*pi*L/8) in seconds."""
    return pmd * np.sqrt(3.0 * np.pi * length_km / 8.0)


def kerr_gamma_bar(gamma: float, length_km: float) -> float:
    """Manakov-averaged nonlinear coefficient (8/9)*gamma*L in rad/W."""
    return 8.0 / 9.0 * gamma * length_km


@dataclass(frozen=True)
class SpanConfig:
    alpha: float
    tau_k: float = default_tau(100.0)
    gamma: float = 1.2
    length_km: float = 100.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.length_km <= 0:
            raise ValueError("length_km must be positive")

    @property
    def gamma_bar(self) -> float:
        return kerr_gamma_bar(self.gamma, self.length_km)


@dataclass(frozen=True)
class ChannelConfig:
    """End-to-end channel settings.

    ``noise_ref_bandwidth_hz`` is the bandwidth in which ``noise_power_dbm``
    is measured; ``None`` means the full simulation bandwidth (2*baud).  The
    noise is always white over the simulated band, so the power actually
    added is ``noise_power_dbm`` scaled by 2*baud / noise_ref_bandwidth_hz.
    """

    spans: tuple[SpanConfig, ...]
    output_alpha: float = 0.0
    baud: float = 32e9
    rolloff: float = 0.1
    launch_power_dbm: float = 10.0
    noise_power_dbm: float = -14.0
    noise_ref_bandwidth_hz: float | None = NOISE_REF_BANDWIDTH_HZ
    rotation_speed: float = 0.0
    rotation_onset_s: float = 0.0
    lpf_cutoff_hz: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(self.spans))
        if not self.spans:
            raise ValueError("at least one span is required")

    @classmethod
    def random(cls, seed: int = 0, n_spans: int = 3, **kwargs) -> "ChannelConfig":
        """Draw all rotation angles uniformly from [-pi, pi] using ``seed``."""
        span_kw = {k: kwargs.pop(k) for k in ("gamma", "length_km", "tau_k") if k in kwargs}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA1FA]))
        angles = rng.uniform(-np.pi, np.pi, n_spans + 1)
        length = span_kw.get("length_km", 100.0)
        span_kw.setdefault("tau_k", default_tau(length))
        spans = tuple(SpanConfig(alpha=float(a), **span_kw) for a in angles[:n_spans])
        return cls(spans=spans, output_alpha=float(angles[-1]), seed=seed, **kwargs)

    @property
    def sample_rate(self) -> float:
        return SAMPLES_PER_SYMBOL * self.baud

    @property
    def cutoff_hz(self) -> float:
        return self.sample_rate / 2 if self.lpf_cutoff_hz is None else self.lpf_cutoff_hz

    @property
    def launch_power_w(self) -> float:
        return dbm_to_watt(self.launch_power_dbm)

    @property
    def simulated_noise_dbm(self) -> float:
        """Total noise power actually added over the simulated band."""
        if self.noise_ref_bandwidth_hz is None:
            return self.noise_power_dbm
        return self.noise_power_dbm + 10 * np.log10(self.sample_rate / self.noise_ref_bandwidth_hz)

    def with_(self, **changes) -> "ChannelConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class PilotBlock:
    """Known transmitted symbols and the matching received waveform.

    Symbol ``k`` is centred on sample ``2*k`` of ``waveform``.
    """

    symbols: np.ndarray
    waveform: JonesWaveform
    config: ChannelConfig = field(repr=False, default=None)

    def __post_init__(self):
        self.symbols.setflags(write=False)
        self.waveform.samples.setflags(write=False)

    @property
    def n_symbols(self) -> int:
        return self.symbols.shape[1]


def rrc_taps(rolloff: float = 0.1, span_symbols: int = RRC_SPAN_SYMBOLS, sps: int = SAMPLES_PER_SYMBOL):
    """Unit-energy root-raised-cosine filter truncated to +-span_symbols."""
    t = np.arange(-span_symbols * sps, span_symbols * sps + 1) / sps
    b = rolloff
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if ti == 0.0:
            h[i] = 1.0 - b + 4.0 * b / np.pi
        elif b > 0 and np.isclose(abs(4.0 * b * ti), 1.0):
            h[i] = b / np.sqrt(2.0) * (
                (1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
            )
        else:
            h[i] = (np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))) / (
                np.pi * ti * (1 - (4 * b * ti) ** 2)
            )
    return h / np.linalg.norm(h)


def frequency_grid(n: int, sample_rate: float) -> np.ndarray:
    """Angular frequencies (rad/s) in FFT bin order; bin 0 is DC."""
    return 2 * np.pi * np.fft.fftfreq(n, d=1.0 / sample_rate)


def generate_symbols(n: int, seed: int) -> np.ndarray:
    """Unit-power PM-QPSK symbols, shape ``(2, n)``."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B01]))
    bits = rng.integers(0, 2, size=(2, 2, n))
    return ((2 * bits[0] - 1) + 1j * (2 * bits[1] - 1)) / np.sqrt(2.0)


def pulse_shape(symbols, launch_power_dbm: float, rolloff: float = 0.1, baud: float = 32e9) -> JonesWaveform:
    """Upsample by 2 and filter with a unit-energy RRC.

    The result is scaled so the mean total power equals the launch power for
    unit-power symbols; all-zero symbols give an all-zero waveform.
    """
    symbols = np.asarray(symbols, dtype=np.complex128)
    if symbols.ndim != 2 or symbols.shape[0] != 2 or symbols.shape[1] == 0:
        raise ValueError("symbols must be a non-empty (2, n) array")
    n = symbols.shape[1]
    up = np.zeros((2, SAMPLES_PER_SYMBOL * n), dtype=np.complex128)
    up[:, ::SAMPLES_PER_SYMBOL] = symbols
    h = rrc_taps(rolloff)
    half = len(h) // 2
    out = np.empty_like(up)
    for p in range(2):
        out[p] = np.convolve(up[p], h)[half : half + up.shape[1]]
    # unit-power symbols at 2 sps through a unit-energy filter give total power 1
    return JonesWaveform(out * np.sqrt(dbm_to_watt(launch_power_dbm)), baud=baud)


def apply_rotation(u, alpha):
    """Apply [[cos a, sin a], [-sin a, cos a]] to a Jones vector or waveform.

    ``alpha`` may be a scalar or a per-sample array.
    """
    is_wf = isinstance(u, JonesWaveform)
    x = u.samples if is_wf else np.asarray(u, dtype=np.complex128)
    c, s = np.cos(alpha), np.sin(alpha)
    out = np.stack([c * x[0] + s * x[1], -s * x[0] + c * x[1]])
    return u.replace(out) if is_wf else out


def apply_dgd(w: JonesWaveform, tau_k: float) -> JonesWaveform:
    """Differential group delay diag(exp(-j w tau/2), exp(+j w tau/2)).

    Applied over the whole block by FFT, so the delay wraps circularly; the
    channel discards a guard interval at both ends for that reason.
    """
    if tau_k == 0.0:
        return w.replace(w.samples.copy())
    omega = frequency_grid(len(w), w.sample_rate)
    spec = np.fft.fft(w.samples, axis=1)
    spec[0] *= np.exp(-0.5j * omega * tau_k)
    spec[1] *= np.exp(0.5j * omega * tau_k)
    return w.replace(np.fft.ifft(spec, axis=1))


def apply_kerr(w: JonesWaveform, gamma_bar: float, sign: int = -1) -> JonesWaveform:
    """Per-sample phase rotation u * exp(sign * j * gamma_bar * |u|^2)."""
    if gamma_bar < 0:
        raise ValueError("gamma_bar must be non-negative")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    phi = gamma_bar * w.norm2()
    return w.replace(w.samples * np.exp(sign * 1j * phi))


def add_noise(w: JonesWaveform, noise_power_dbm: float, rng: np.random.Generator) -> JonesWaveform:
    """Add circular complex AWGN with the given total power (both polarizations)."""
    if noise_power_dbm == -np.inf:
        return w.replace(w.samples.copy())
    sigma = np.sqrt(dbm_to_watt(noise_power_dbm) / 4.0)
    noise = rng.standard_normal((2, len(w))) + 1j * rng.standard_normal((2, len(w)))
    return w.replace(w.samples + sigma * noise)


def lowpass(w: JonesWaveform, cutoff_hz: float) -> JonesWaveform:
    """Ideal brick-wall filter keeping |f| <= cutoff_hz."""
    nyquist = w.sample_rate / 2
    if cutoff_hz > nyquist * (1 + 1e-12):
        raise ValueError(f"cutoff {cutoff_hz:g} Hz exceeds Nyquist {nyquist:g} Hz")
    f = np.fft.fftfreq(len(w), d=1.0 / w.sample_rate)
    keep = np.abs(f) <= cutoff_hz * (1 + 1e-12)
    if keep.all():
        return w.replace(w.samples.copy())
    spec = np.fft.fft(w.samples, axis=1)
    spec[:, ~keep] = 0.0
    return w.replace(np.fft.ifft(spec, axis=1))


def _angles(alpha0: float, cfg: ChannelConfig, t: np.ndarray):
    if cfg.rotation_speed == 0.0:
        return alpha0
    return alpha0 + cfg.rotation_speed * np.maximum(t - cfg.rotation_onset_s, 0.0)


def run_channel(cfg: ChannelConfig, n_symbols: int, seed: int, *, noise: bool = True) -> PilotBlock:
    """Generate ``n_symbols`` pilots and the received waveform.

    A guard of ``GUARD_SAMPLES`` samples is simulated on each side and
    dropped, so block edges carry no circular wrap-around from the DGD.
    """
    if n_symbols <= 0:
        raise ValueError("n_symbols must be positive")
    g = GUARD_SAMPLES // SAMPLES_PER_SYMBOL
    sym = generate_symbols(n_symbols + 2 * g, seed)
    w = pulse_shape(sym, cfg.launch_power_dbm, cfg.rolloff, cfg.baud)
    t = np.arange(len(w)) / cfg.sample_rate
    for span in cfg.spans:
        w = apply_rotation(w, _angles(span.alpha, cfg, t))
        w = apply_dgd(w, span.tau_k)
        w = apply_kerr(w, span.gamma_bar, -1)
    w = apply_rotation(w, _angles(cfg.output_alpha, cfg, t))
    if noise:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0A15E]))
        w = add_noise(w, cfg.simulated_noise_dbm, rng)
    w = lowpass(w, cfg.cutoff_hz)
    samples = np.ascontiguousarray(w.samples[:, GUARD_SAMPLES : GUARD_SAMPLES + SAMPLES_PER_SYMBOL * n_symbols])
    return PilotBlock(np.ascontiguousarray(sym[:, g : g + n_symbols]), w.replace(samples), cfg)


_JWAV_HEADER = struct.Struct("<4sIQIId")
JWAV_VERSION = 1


def write_jwav(path, w: JonesWaveform) -> None:
    """Write a waveform as 32-byte header + float64 (x_re, x_im, y_re, y_im) records."""
    header = _JWAV_HEADER.pack(b"JWAV", JWAV_VERSION, len(w), w.samples_per_symbol, 0, float(w.baud))
    body = np.empty((len(w), 4), dtype="<f8")
    body[:, 0] = w.samples[0].real
    body[:, 1] = w.samples[0].imag
    body[:, 2] = w.samples[1].real
    body[:, 3] = w.samples[1].imag
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def read_jwav(path) -> JonesWaveform:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, count, sps, _, baud = _JWAV_HEADER.unpack_from(raw)
    if magic != b"JWAV":
        raise ValueError("not a JWAV file")
    if version != JWAV_VERSION:
        raise ValueError(f"unsupported JWAV version {version}")
    body = np.frombuffer(raw, dtype="<f8", offset=_JWAV_HEADER.size, count=4 * count).reshape(count, 4)
    samples = np.stack([body[:, 0] + 1j * body[:, 1], body[:, 2] + 1j * body[:, 3]])
    return JonesWaveform(samples, sps, baud)

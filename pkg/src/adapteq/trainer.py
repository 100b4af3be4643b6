"""Online supervised training over a continuous pilot stream."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _kernels as K
from .backprop import DivergenceError, TaylorConfig, _divisor_value
from .channel import ChannelConfig, PilotBlock, rrc_taps, run_channel
from .equalizer import N_STEPS, EqualizerState, _qt, select_decimation_phase
from .numerics import WordlengthProfile

__all__ = [
    "SNR_WINDOW",
    "TrainingConfig",
    "MetricSeries",
    "RunResult",
    "effective_snr_db",
    "sliding_window_snr",
    "init_identity",
    "init_channel_inverse",
    "align_polarization",
    "fir_fractional_delay",
    "default_learning_rate",
    "train",
    "train_on_block",
]

SNR_WINDOW = 4096
FLOOR = 1e-3

# Learning rate per launch power (dBm) for B=21.  Derived, not published:
# best 2**-k (k = 6..11) by mean steady-state SNR over two channel seeds at
# 3e5 symbols with aligned identity init, reference mode.  At 12 and 14 dBm the
# optimum sits at the grid edge and the curve is flat within 0.1 dB there.
LEARNING_RATE_TABLE = {
    0.0: 2.0**-8,
    4.0: 2.0**-8,
    6.0: 2.0**-8,
    8.0: 2.0**-8,
    10.0: 2.0**-9,
    12.0: 2.0**-11,
    14.0: 2.0**-11,
}


def default_learning_rate(launch_power_dbm: float) -> float:
    """Nearest entry of the per-power table."""
    keys = np.array(sorted(LEARNING_RATE_TABLE))
    return LEARNING_RATE_TABLE[float(keys[np.argmin(np.abs(keys - launch_power_dbm))])]


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 21
    learning_rate: float | None = None
    n_symbols: int = 300_000
    update_delay: int = 0
    profile: WordlengthProfile | None = None
    taylor: TaylorConfig = field(default_factory=TaylorConfig)
    divisor: object = None
    snapshot_every: int = 0
    align: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.update_delay < 0:
            raise ValueError("update_delay must be >= 0")
        if self.n_symbols < self.batch_size:
            raise ValueError("n_symbols must cover at least one batch")

    @property
    def mode(self) -> str:
        return "reference" if self.profile is None else "quantized"

    def resolved_rate(self, launch_power_dbm: float) -> float:
        return default_learning_rate(launch_power_dbm) if self.learning_rate is None else self.learning_rate

    def describe(self) -> dict:
        d = {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "n_symbols": self.n_symbols,
            "update_delay": self.update_delay,
            "mode": self.mode,
            "wordlengths": None if self.profile is None else list(self.profile.wordlengths),
            "taylor_order": self.taylor.order if self.taylor.enabled else None,
            "divisor": _describe_divisor(self.divisor),
            "align": self.align,
        }
        return d


def _describe_divisor(divisor):
    if divisor is None or isinstance(divisor, str):
        return divisor or "exact"
    return list(divisor.shifts)


@dataclass
class MetricSeries:
    sq_error: np.ndarray
    batch_loss: np.ndarray
    batch_size: int
    window: int = SNR_WINDOW
    snapshots: np.ndarray | None = None

    @property
    def window_snr_db(self) -> np.ndarray:
        """Entry ``i`` covers symbols ``i .. i + window - 1``."""
        return sliding_window_snr(self.sq_error, self.window)

    def steady_state_snr_db(self) -> float | None:
        """Mean window SNR over the last quarter of the run (windows ending there)."""
        n = self.sq_error.size
        if n < 4 * self.window:
            return None
        snr = self.window_snr_db
        end_idx = np.arange(snr.size) + self.window - 1
        return float(np.mean(snr[end_idx >= n - n // 4]))

    def convergence_index(self) -> int | None:
        """Symbol index at which the window SNR first comes within 0.5 dB of steady state."""
        ss = self.steady_state_snr_db()
        if ss is None:
            return None
        snr = self.window_snr_db
        hit = np.nonzero(snr >= ss - 0.5)[0]
        return int(hit[0] + self.window - 1) if hit.size else None

    def to_csv(self, header_comment: str | None = None) -> str:
        """``symbol_index,window_snr_db,batch_loss`` with one row per symbol."""
        snr = self.window_snr_db if self.sq_error.size >= self.window else np.array([])
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["symbol_index", "window_snr_db", "batch_loss"])
        B = self.batch_size
        for i in range(self.sq_error.size):
            j = i - self.window + 1
            s = repr(float(snr[j])) if 0 <= j < snr.size else ""
            l = repr(float(self.batch_loss[i // B])) if (i + 1) % B == 0 else ""
            w.writerow([i, s, l])
        return buf.getvalue()


@dataclass
class RunResult:
    state: EqualizerState
    metrics: MetricSeries
    steady_state_snr_db: float | None
    convergence_index: int | None
    config: dict
    seed: int


def effective_snr_db(mse: float) -> float:
    """Inverse MSE in dB for a unit-power constellation."""
    if not mse > 0:
        raise ValueError("MSE must be positive")
    return float(-10.0 * np.log10(mse))


def sliding_window_snr(series, window: int = SNR_WINDOW) -> np.ndarray:
    """Effective SNR of the mean of each trailing window of per-symbol squared errors."""
    series = np.asarray(series, dtype=float)
    if series.size < window:
        raise ValueError(f"series of length {series.size} is shorter than the window {window}")
    csum = np.concatenate([[0.0], np.cumsum(series)])
    mse = (csum[window:] - csum[:-window]) / window
    if np.any(mse <= 0):
        raise ValueError("window with zero mean squared error")
    return -10.0 * np.log10(mse)


def _equalizer_gammas(ch: ChannelConfig | None, layer_order: str) -> np.ndarray:
    """Equalizer step i undoes the Kerr phase of span n-1-i."""
    if ch is None:
        return np.zeros(N_STEPS)
    if len(ch.spans) != N_STEPS:
        raise ValueError(f"the equalizer needs exactly {N_STEPS} spans, got {len(ch.spans)}")
    return np.array([sp.gamma_bar for sp in reversed(ch.spans)])


def init_identity(ch: ChannelConfig | None = None, n_taps: int = 5, layer_order: str = "kerr_first",
                  gamma_bar=None) -> EqualizerState:
    """Centre-tap identity steps; Kerr coefficients from ``ch`` (zero without one)."""
    taps = np.zeros((N_STEPS, 2, 2, n_taps))
    taps[:, 0, 0, n_taps // 2] = taps[:, 1, 1, n_taps // 2] = 1.0
    gam = _equalizer_gammas(ch, layer_order) if gamma_bar is None else gamma_bar
    return EqualizerState(
        linear_taps=taps,
        gamma_bar=gam,
        mf_taps=rrc_taps(ch.rolloff if ch else 0.1),
        layer_order=layer_order,
        input_power_w=ch.launch_power_w if ch else 1.0,
    )


def _rot(alpha: float) -> np.ndarray:
    c, s = np.cos(alpha), np.sin(alpha)
    return np.array([[c, s], [-s, c]])


def fir_fractional_delay(delay_samples: float, n_taps: int = 5, rolloff: float = 0.1, grid: int = 2048) -> np.ndarray:
    """Real FIR whose response best matches exp(-j*w*delay) in weighted least squares.

    Weights follow the RRC power spectrum (plus a small floor), so the fit
    concentrates on the occupied band.  Taps use the centred convention
    ``out[n] = sum_t w[t] in[n + c - t]``.
    """
    c = (n_taps - 1) // 2
    w = np.linspace(-np.pi, np.pi, grid, endpoint=False)
    f_sym = np.abs(w) / np.pi  # frequency in units of the symbol rate (fs = 2 baud)
    lo, hi = (1 - rolloff) / 2, (1 + rolloff) / 2
    spec = np.where(f_sym <= lo, 1.0, np.where(f_sym >= hi, 0.0, 0.5 * (1 + np.cos(np.pi / rolloff * (f_sym - lo)))))
    weight = np.sqrt(spec + FLOOR)
    basis = np.exp(-1j * np.outer(w, np.arange(n_taps) - c))
    target = np.exp(-1j * w * delay_samples)
    A = np.vstack([(basis * weight[:, None]).real, (basis * weight[:, None]).imag])
    b = np.concatenate([(target * weight).real, (target * weight).imag])
    return np.linalg.lstsq(A, b, rcond=None)[0]


def init_channel_inverse(ch: ChannelConfig, n_taps: int = 5) -> EqualizerState:
    """Analytic approximate inverse of a 3-span channel (kerr_first layout).

    Step i inverts span n-1-i: Kerr with +gamma_bar, then the 5-tap
    least-squares inverse of that span's DGD followed by its inverse
    rotation.  The output rotation is folded into the first linear step,
    which is exact because Kerr phases commute with rotations.
    """
    if len(ch.spans) != N_STEPS:
        raise ValueError(f"the equalizer needs exactly {N_STEPS} spans, got {len(ch.spans)}")
    ts = 1.0 / ch.sample_rate
    taps = np.zeros((N_STEPS, 2, 2, n_taps))
    for i, span in enumerate(reversed(ch.spans)):
        # inverse DGD: x is advanced by tau/2, y delayed by tau/2
        dx = fir_fractional_delay(-0.5 * span.tau_k / ts, n_taps, ch.rolloff)
        dy = fir_fractional_delay(0.5 * span.tau_k / ts, n_taps, ch.rolloff)
        pre = _rot(-ch.output_alpha) if i == 0 else np.eye(2)
        post = _rot(-span.alpha)
        for t in range(n_taps):
            taps[i, :, :, t] = post @ np.diag([dx[t], dy[t]]) @ pre
    return EqualizerState(
        linear_taps=taps,
        gamma_bar=_equalizer_gammas(ch, "kerr_first"),
        mf_taps=rrc_taps(ch.rolloff),
        layer_order="kerr_first",
        input_power_w=ch.launch_power_w,
    )


def align_polarization(block: PilotBlock, s: EqualizerState, n_symbols: int = 2048) -> EqualizerState:
    """Fold a pilot-estimated polarization rotation into the first linear step.

    The equalizer output for ``n_symbols`` pilots is fitted to the pilots
    with a real 2x2 matrix by least squares; its nearest rotation (polar
    factor) left-multiplies every tap of the step that sees the signal
    first.  Kerr steps commute with rotations, so only the output
    orientation changes.
    """
    from .equalizer import equalizer_forward, symbol_range

    lo, count = symbol_range(len(block.waveform), s)
    n = min(count, n_symbols)
    y, _ = equalizer_forward(block.waveform, s, first_symbol=lo, n_symbols=n)
    x = block.symbols[:, lo : lo + n]
    Y = np.hstack([y.real, y.imag])
    X = np.hstack([x.real, x.imag])
    A = X @ np.linalg.pinv(Y)
    u, _, vt = np.linalg.svd(A)
    R = u @ vt
    taps = np.array(s.linear_taps)
    taps[0] = np.einsum("ab,bct->act", R, taps[0])
    return s.with_taps(taps)


def train_on_block(block: PilotBlock, s0: EqualizerState, tc: TrainingConfig, xi: float,
                   first_symbol: int, n_batches: int, select_phase: bool = True):
    """Run the SGD loop on an existing pilot block.

    Returns ``(final_state, MetricSeries)``.
    """
    state = s0
    if select_phase:
        state = replace(state, phase=select_decimation_phase(block.waveform, state))
    if tc.align:
        state = align_polarization(block, state)
    profile = tc.profile
    qt, quant = _qt(profile)
    taps, gams, h = state.kernel_params(profile)
    kinds, pidx = state.layers()
    B = tc.batch_size
    n_sym = n_batches * B
    last_needed = 2 * (first_symbol + n_sym - 1) + state.phase + state.half_window
    if 2 * first_symbol + state.phase - state.half_window < 0 or last_needed >= len(block.waveform):
        raise ValueError("pilot block too short for the requested batches")
    sq_err = np.zeros(n_sym)
    batch_loss = np.zeros(n_batches)
    n_snaps = n_batches // tc.snapshot_every if tc.snapshot_every else 0
    snaps = np.zeros((n_snaps,) + taps.shape)
    div = _divisor_value(B, tc.divisor)
    status = K.train_loop(
        np.ascontiguousarray(block.waveform.samples), np.ascontiguousarray(block.symbols),
        first_symbol, n_batches, B, kinds, pidx, taps, gams, h, state.half_window, state.phase,
        1.0 / np.sqrt(state.input_power_w), div, float(xi), tc.update_delay, tc.taylor.kernel_order,
        qt, quant, tc.snapshot_every, sq_err, batch_loss, snaps,
    )
    if status >= 0:
        raise DivergenceError(f"training diverged at batch {status}", batch_index=int(status))
    return state.with_taps(taps), MetricSeries(sq_err, batch_loss, B, SNR_WINDOW, snaps if n_snaps else None)


def stream_margin(s: EqualizerState) -> int:
    """Symbols to simulate beyond each end of the trained range."""
    return s.half_window // 2 + 2


def train(ch: ChannelConfig, s0: EqualizerState, tc: TrainingConfig, seed: int) -> RunResult:
    """Stream ``tc.n_symbols`` pilots through the channel and train online.

    Deterministic for a given ``seed``.  Raises :class:`DivergenceError`
    carrying the batch index if the loss or gradient becomes non-finite.
    """
    xi = tc.resolved_rate(ch.launch_power_dbm)
    margin = stream_margin(s0)
    n_batches = tc.n_symbols // tc.batch_size
    block = run_channel(ch, n_batches * tc.batch_size + 2 * margin, seed)
    state, metrics = train_on_block(block, s0, tc, xi, margin, n_batches)
    ss = metrics.steady_state_snr_db()
    cfg = {"channel": _channel_echo(ch), "training": tc.describe(), "learning_rate": xi}
    return RunResult(state, metrics, ss, metrics.convergence_index(), cfg, seed)


def _channel_echo(ch: ChannelConfig) -> dict:
    d = asdict(ch)
    d["spans"] = [asdict(s) for s in ch.spans]
    return d

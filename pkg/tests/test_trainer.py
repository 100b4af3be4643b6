from dataclasses import replace

import numpy as np
import pytest

from adapteq.backprop import BackwardOptions, DivergenceError, backward, loss_and_adjoint
from adapteq.channel import ChannelConfig, SpanConfig, run_channel
from adapteq.equalizer import equalizer_forward, select_decimation_phase
from adapteq.numerics import WordlengthProfile
from adapteq.trainer import (
    SNR_WINDOW,
    MetricSeries,
    TrainingConfig,
    align_polarization,
    default_learning_rate,
    effective_snr_db,
    fir_fractional_delay,
    init_channel_inverse,
    init_identity,
    sliding_window_snr,
    stream_margin,
    train,
    train_on_block,
)


def test_effective_snr_examples():
    assert effective_snr_db(1.0) == 0.0
    assert effective_snr_db(0.01) == pytest.approx(20.0)
    assert effective_snr_db(10**-2.12) == pytest.approx(21.2)
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            effective_snr_db(bad)


def test_sliding_window_snr():
    np.testing.assert_allclose(sliding_window_snr(np.full(5000, 0.01)), 20.0)
    with pytest.raises(ValueError):
        sliding_window_snr(np.zeros(5000))
    with pytest.raises(ValueError):
        sliding_window_snr(np.ones(100))
    step = np.concatenate([np.full(6000, 0.1), np.full(6000, 0.01)])
    snr = sliding_window_snr(step)
    moving = np.nonzero((snr > 10 + 1e-9) & (snr < 20 - 1e-9))[0]
    # windows starting in (6000 - 4096, 6000) straddle the step
    assert moving[0] == 6000 - SNR_WINDOW + 1 and moving[-1] == 5999
    assert moving.size == SNR_WINDOW - 1


def test_metric_series_steady_state_and_csv():
    sq = np.concatenate([np.full(8192, 0.1), np.full(8192, 0.01)])
    m = MetricSeries(sq, np.arange(16384 // 16, dtype=float), 16)
    assert m.steady_state_snr_db() == pytest.approx(20.0)
    assert m.convergence_index() is not None and 8192 < m.convergence_index() < 8192 + SNR_WINDOW
    short = MetricSeries(np.full(4 * SNR_WINDOW - 1, 0.01), np.zeros(10), 1)
    assert short.steady_state_snr_db() is None and short.convergence_index() is None
    text = MetricSeries(np.full(4200, 0.01), np.arange(200, dtype=float), 21).to_csv("hash")
    lines = text.splitlines()
    assert lines[0] == "# hash" and lines[1] == "symbol_index,window_snr_db,batch_loss"
    assert len(lines) == 2 + 4200
    assert lines[2] == "0,,"
    assert lines[2 + 20].endswith(",0.0") and lines[2 + 41].endswith(",1.0")
    assert lines[2 + 4095].split(",")[1] != ""


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainingConfig(learning_rate=-0.1)
    with pytest.raises(ValueError):
        TrainingConfig(update_delay=-1)
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=21, n_symbols=10)
    assert TrainingConfig().resolved_rate(10.0) == default_learning_rate(10.0) == 2.0**-9
    assert TrainingConfig(learning_rate=0.25).resolved_rate(10.0) == 0.25


def test_init_identity():
    ch = ChannelConfig.random(seed=1)
    s = init_identity(ch)
    assert set(np.unique(s.linear_taps)) <= {0.0, 1.0} and s.n_trainable == 60
    np.testing.assert_allclose(s.gamma_bar, [sp.gamma_bar for sp in ch.spans][::-1])
    assert s.input_power_w == pytest.approx(0.01)


def test_gradient_nonzero_at_identity():
    ch = ChannelConfig.random(seed=1)
    blk = run_channel(ch, 400, 1)
    s = init_identity(ch)
    y, tape = equalizer_forward(blk.waveform, s, first_symbol=30, n_symbols=21)
    _, dy = loss_and_adjoint(y, blk.symbols[:, 30:51])
    assert np.max(np.abs(backward(tape, dy, s))) > 1e-3


def test_init_channel_inverse_requires_three_spans():
    ch = ChannelConfig(spans=(SpanConfig(alpha=0.0),))
    with pytest.raises(ValueError):
        init_channel_inverse(ch)
    with pytest.raises(ValueError):
        init_identity(ch)


def test_fractional_delay_fir():
    h0 = fir_fractional_delay(0.0)
    np.testing.assert_allclose(h0, [0, 0, 1, 0, 0], atol=1e-10)
    h = fir_fractional_delay(0.3)
    for w in (0.2, 0.5, 1.0, 1.5):  # occupied band is |w| < 0.55*pi
        resp = np.sum(h * np.exp(-1j * w * (np.arange(5) - 2)))
        assert abs(resp - np.exp(-1j * w * 0.3)) < 1e-2


def test_align_polarization_recovers_rotation():
    spans = tuple(SpanConfig(alpha=0.0, tau_k=0.0, gamma=0.0) for _ in range(3))
    ch = ChannelConfig(spans=spans, output_alpha=2.6)
    blk = run_channel(ch, 4000, 1, noise=False)
    s = init_identity(ch)
    aligned = align_polarization(blk, s)
    y, tape = equalizer_forward(blk.waveform, aligned)
    x = blk.symbols[:, tape.first_symbol : tape.first_symbol + y.shape[1]]
    assert effective_snr_db(np.mean(np.abs(y - x) ** 2)) > 40


# ---------------------------------------------------------------- training loop


@pytest.fixture(scope="module")
def block():
    ch = ChannelConfig.random(seed=2)
    return ch, run_channel(ch, 3000, 5)


def _sq(e):
    return (e[0].real ** 2 + e[0].imag ** 2 + e[1].real ** 2 + e[1].imag ** 2) / 2


@pytest.mark.parametrize("profile", [None, WordlengthProfile()])
def test_batch_boundary_transparency(block, profile):
    ch, blk = block
    s0 = init_identity(ch)
    m = stream_margin(s0)
    tc = TrainingConfig(batch_size=21, n_symbols=21 * 100, profile=profile)
    state, metrics = train_on_block(blk, s0, tc, 0.0, m, 100)
    np.testing.assert_array_equal(state.linear_taps, s0.linear_taps)
    y, _ = equalizer_forward(blk.waveform, state, profile, first_symbol=m, n_symbols=2100)
    assert metrics.sq_error.tobytes() == _sq(y - blk.symbols[:, m : m + 2100]).tobytes()


def test_first_update_matches_public_backward(block):
    ch, blk = block
    s0 = replace(init_identity(ch), phase=select_decimation_phase(blk.waveform, init_identity(ch)))
    m = stream_margin(s0)
    tc = TrainingConfig(batch_size=21, n_symbols=21)
    state, _ = train_on_block(blk, s0, tc, 1.0, m, 1, select_phase=False)
    y, tape = equalizer_forward(blk.waveform, s0, first_symbol=m, n_symbols=21)
    _, dy = loss_and_adjoint(y, blk.symbols[:, m : m + 21])
    g = backward(tape, dy, s0, BackwardOptions())
    np.testing.assert_allclose(state.linear_taps, s0.linear_taps - g, rtol=0, atol=1e-15)


def test_update_delay(block):
    ch, blk = block
    s0 = init_identity(ch)
    m = stream_margin(s0)
    delayed, _ = train_on_block(blk, s0, TrainingConfig(batch_size=21, n_symbols=63, update_delay=3), 0.1, m, 3)
    np.testing.assert_array_equal(delayed.linear_taps, s0.linear_taps)
    d1, _ = train_on_block(blk, s0, TrainingConfig(batch_size=21, n_symbols=84, update_delay=1), 0.1, m, 4)
    d0, _ = train_on_block(blk, s0, TrainingConfig(batch_size=21, n_symbols=84), 0.1, m, 4)
    assert not np.array_equal(d0.linear_taps, d1.linear_taps)


def test_quantized_training_keeps_formats(block):
    ch, blk = block
    prof = WordlengthProfile()
    s0 = init_identity(ch)
    tc = TrainingConfig(batch_size=21, n_symbols=2100, profile=prof, snapshot_every=10)
    state, metrics = train_on_block(blk, s0, tc, 2.0**-9, stream_margin(s0), 100)
    assert prof.wl_taps.is_representable(state.linear_taps)
    assert metrics.snapshots.shape == (10, 3, 2, 2, 5)
    assert prof.wl_taps.is_representable(metrics.snapshots)


def test_divergence_reports_batch(block):
    ch, blk = block
    s0 = init_identity(ch)
    with pytest.raises(DivergenceError) as info:
        train_on_block(blk, s0, TrainingConfig(batch_size=21, n_symbols=2100), 1e6, stream_margin(s0), 100)
    assert info.value.batch_index is not None and 0 <= info.value.batch_index < 100


def test_block_too_short(block):
    ch, blk = block
    with pytest.raises(ValueError):
        train_on_block(blk, init_identity(ch), TrainingConfig(batch_size=21, n_symbols=21 * 200), 0.0, 20, 200)


def test_train_zero_rate_flat_and_deterministic():
    ch = ChannelConfig.random(seed=3)
    tc = TrainingConfig(learning_rate=0.0, n_symbols=20_000)
    a = train(ch, init_identity(ch), tc, seed=1)
    b = train(ch, init_identity(ch), tc, seed=1)
    assert a.metrics.sq_error.tobytes() == b.metrics.sq_error.tobytes()
    assert a.metrics.batch_loss.tobytes() == b.metrics.batch_loss.tobytes()
    np.testing.assert_array_equal(a.state.linear_taps, init_identity(ch).linear_taps)
    snr = a.metrics.window_snr_db
    assert np.ptp(snr) < 1.0
    assert a.seed == 1 and a.config["learning_rate"] == 0.0


def test_train_learns_and_inverse_init_not_worse():
    ch = ChannelConfig.random(seed=1)
    tc = TrainingConfig(n_symbols=60_000, align=True)
    ident = train(ch, init_identity(ch), tc, seed=2)
    inv = train(ch, init_channel_inverse(ch), tc, seed=2)
    frozen = train(ch, init_identity(ch), replace(tc, learning_rate=0.0), seed=2)
    assert ident.steady_state_snr_db > frozen.steady_state_snr_db + 2
    assert inv.steady_state_snr_db >= ident.steady_state_snr_db - 0.1


def test_shift_divisor_training_runs():
    ch = ChannelConfig.random(seed=1)
    r = train(ch, init_identity(ch), TrainingConfig(n_symbols=20_000, divisor="shift", align=True), seed=2)
    assert r.steady_state_snr_db > 10
    assert r.config["training"]["divisor"] == "shift"

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapteq.channel import (
    GUARD_SAMPLES,
    ChannelConfig,
    SpanConfig,
    _angles,
    add_noise,
    apply_dgd,
    apply_kerr,
    apply_rotation,
    dbm_to_watt,
    default_tau,
    frequency_grid,
    generate_symbols,
    kerr_gamma_bar,
    lowpass,
    pulse_shape,
    read_jwav,
    rrc_taps,
    run_channel,
    write_jwav,
)
from adapteq.numerics import JonesWaveform


def _rand_wf(n, seed=0, power=1.0):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((2, n)) + 1j * rng.standard_normal((2, n))
    return JonesWaveform(s * np.sqrt(power / 4))


def _tone(n, f, fs=64e9):
    t = np.arange(n) / fs
    return JonesWaveform(np.stack([np.exp(2j * np.pi * f * t), np.zeros(n)]))


def _linear_channel(**kw):
    spans = tuple(SpanConfig(alpha=0.0, tau_k=0.0, gamma=0.0) for _ in range(3))
    return ChannelConfig(spans=spans, **kw)


# ---------------------------------------------------------------- symbols / pulses


def test_symbols_constellation_and_power():
    x = generate_symbols(100_000, 7)
    assert x.shape == (2, 100_000)
    pts = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2)
    assert np.all(np.min(np.abs(x[..., None] - pts), axis=-1) < 1e-15)
    np.testing.assert_allclose(np.mean(np.abs(x) ** 2, axis=1), 1.0, atol=0.01)


def test_symbols_deterministic_and_validated():
    np.testing.assert_array_equal(generate_symbols(50, 3), generate_symbols(50, 3))
    assert not np.array_equal(generate_symbols(50, 3), generate_symbols(50, 4))
    with pytest.raises(ValueError):
        generate_symbols(0, 1)


def test_rrc_shape():
    h = rrc_taps(0.1)
    assert h.size == 65
    assert np.linalg.norm(h) == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(h, h[::-1], atol=1e-15)


def test_rrc_pair_is_nyquist():
    h = rrc_taps(0.1)
    rc = np.convolve(h, h)
    centre = rc.size // 2
    isi = np.delete(rc[centre % 2 :: 2], centre // 2)
    assert 20 * np.log10(np.max(np.abs(isi)) / rc[centre]) < -40


def test_pulse_shape_power_and_zero():
    w = pulse_shape(generate_symbols(20_000, 1), 10.0)
    assert w.power() == pytest.approx(0.01, rel=0.01)
    z = pulse_shape(np.zeros((2, 100)), 10.0)
    assert np.all(z.samples == 0)
    with pytest.raises(ValueError):
        pulse_shape(np.zeros((2, 0)), 0.0)


# ---------------------------------------------------------------- operators


def test_rotation_examples():
    u = np.array([1.0 + 0j, 0.0])
    np.testing.assert_array_equal(apply_rotation(u, 0.0), u)
    np.testing.assert_allclose(apply_rotation(u, np.pi / 2), [0, -1], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10), st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_rotation_preserves_norm(alpha, c):
    u = np.array([c[0] + 1j * c[1], c[2] + 1j * c[3]])
    assert np.linalg.norm(apply_rotation(u, alpha)) == pytest.approx(np.linalg.norm(u), rel=1e-12, abs=1e-12)


def test_rotation_per_sample_angles():
    w = _rand_wf(8)
    alpha = np.linspace(0, 1, 8)
    out = apply_rotation(w, alpha)
    for i in range(8):
        np.testing.assert_allclose(out.samples[:, i], apply_rotation(w.samples[:, i], alpha[i]))


def test_frequency_grid():
    om = frequency_grid(8, 64e9)
    assert om[0] == 0.0
    np.testing.assert_allclose(om[1:4], -om[-1:-4:-1])


def test_default_tau():
    assert default_tau(100.0) == pytest.approx(2.1708e-12, rel=1e-4)


def test_dgd_tone_phase():
    tau = default_tau(100.0)
    n = 4096
    w = _tone(n, 16e9)
    out = apply_dgd(w, tau)
    ratio = out.samples[0] / w.samples[0]
    np.testing.assert_allclose(np.angle(ratio), -np.pi * 16e9 * tau, atol=1e-12)
    assert np.angle(ratio[0]) == pytest.approx(-0.10909, abs=1e-4)
    np.testing.assert_allclose(np.abs(out.samples[1]), 0, atol=1e-15)


def test_dgd_identity_and_energy():
    w = _rand_wf(1000)
    np.testing.assert_array_equal(apply_dgd(w, 0.0).samples, w.samples)
    out = apply_dgd(w, 3e-12)
    assert abs(out.energy() / w.energy() - 1) < 1e-10


def test_kerr_examples():
    gb = kerr_gamma_bar(1.2, 100.0)
    assert gb == pytest.approx(106.667, abs=1e-3)
    u = np.array([[np.sqrt(0.01) + 0j], [0.0]])
    out = apply_kerr(JonesWaveform(u), gb, -1)
    assert np.angle(out.samples[0, 0]) == pytest.approx(-1.066667, abs=1e-6)
    z = apply_kerr(JonesWaveform(np.zeros((2, 3))), gb)
    assert np.all(z.samples == 0)
    w = _rand_wf(500, power=0.01)
    np.testing.assert_allclose(apply_kerr(w, gb).norm2(), w.norm2(), rtol=1e-12)
    with pytest.raises(ValueError):
        apply_kerr(w, -1.0)


def test_kerr_commutes_with_rotation():
    w = _rand_wf(200, power=0.01)
    a = apply_kerr(apply_rotation(w, 0.7), 106.7)
    b = apply_rotation(apply_kerr(w, 106.7), 0.7)
    np.testing.assert_allclose(a.samples, b.samples, atol=1e-14)


def test_noise_power_and_symmetry():
    w = JonesWaveform(np.zeros((2, 1_000_000)))
    rng = np.random.default_rng(5)
    n = add_noise(w, -14.0, rng).samples
    p = np.mean(np.sum(np.abs(n) ** 2, axis=0))
    assert abs(10 * np.log10(p / 1e-3) + 14.0) < 0.05
    var_re, var_im = np.var(n.real, axis=1), np.var(n.imag, axis=1)
    np.testing.assert_allclose(var_re, var_im, rtol=0.01)
    np.testing.assert_allclose(var_re + var_im, dbm_to_watt(-14) / 2, rtol=0.01)
    assert add_noise(_rand_wf(10), -np.inf, rng).samples.tolist() == _rand_wf(10).samples.tolist()


def test_lowpass():
    w = _rand_wf(512)
    np.testing.assert_array_equal(lowpass(w, 32e9).samples, w.samples)
    hi = lowpass(_tone(512, 20e9), 16e9)
    np.testing.assert_allclose(hi.samples, 0, atol=1e-12)
    lo_in = _tone(512, 8e9)
    np.testing.assert_allclose(np.abs(lowpass(lo_in, 16e9).samples[0]), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        lowpass(w, 40e9)


def test_linear_channel_superposition():
    a, b = _rand_wf(256, 1), _rand_wf(256, 2)

    def chain(w):
        for alpha in (0.3, -1.2, 2.0):
            w = apply_dgd(apply_rotation(w, alpha), 2e-12)
        return apply_rotation(w, 0.5)

    lhs = chain(a.replace(a.samples + 2.0 * b.samples)).samples
    rhs = chain(a).samples + 2.0 * chain(b).samples
    assert np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)) < 1e-9


# ---------------------------------------------------------------- end to end


def test_identity_channel_equals_transmit():
    cfg = _linear_channel()
    blk = run_channel(cfg, 500, seed=3, noise=False)
    g = GUARD_SAMPLES // 2
    sym = generate_symbols(500 + 2 * g, 3)
    tx = pulse_shape(sym, cfg.launch_power_dbm).samples[:, GUARD_SAMPLES : GUARD_SAMPLES + 1000]
    np.testing.assert_allclose(blk.waveform.samples, tx, atol=1e-15)
    np.testing.assert_array_equal(blk.symbols, sym[:, g : g + 500])


def test_run_channel_deterministic():
    cfg = ChannelConfig.random(seed=4)
    a, b = run_channel(cfg, 300, 9), run_channel(cfg, 300, 9)
    assert a.waveform.samples.tobytes() == b.waveform.samples.tobytes()


def test_random_angles_in_range():
    cfg = ChannelConfig.random(seed=11)
    angles = [s.alpha for s in cfg.spans] + [cfg.output_alpha]
    assert len(cfg.spans) == 3 and all(-np.pi <= a <= np.pi for a in angles)
    assert cfg.spans[0].gamma_bar == pytest.approx(106.667, abs=1e-3)


def test_rotation_drift():
    cfg = _linear_channel(rotation_speed=1e5)
    t_end = 2**21 / cfg.sample_rate  # 2**20 symbols
    assert t_end == pytest.approx(32.8e-6, rel=2e-3)
    assert _angles(0.0, cfg, np.array([t_end]))[0] == pytest.approx(3.28, abs=0.01)
    late = cfg.with_(rotation_onset_s=10e-6)
    assert _angles(0.0, late, np.array([5e-6]))[0] == 0.0


def test_time_varying_rotation_applied():
    cfg = ChannelConfig(spans=(SpanConfig(alpha=0.0, tau_k=0.0, gamma=0.0),), rotation_speed=1e9)
    blk = run_channel(cfg, 64, 1, noise=False)
    static = run_channel(cfg.with_(rotation_speed=0.0), 64, 1, noise=False)
    t = (np.arange(128) + GUARD_SAMPLES) / cfg.sample_rate
    expect = apply_rotation(static.waveform.samples, 2 * 1e9 * t)
    np.testing.assert_allclose(blk.waveform.samples, expect, atol=1e-12)


@pytest.mark.parametrize("ref_bw, expected_db", [(None, 24.0), (400e9, 24.0 + 10 * np.log10(400 / 64))])
def test_received_snr(ref_bw, expected_db):
    cfg = ChannelConfig.random(seed=2, noise_ref_bandwidth_hz=ref_bw)
    clean = run_channel(cfg, 200_000, 1, noise=False).waveform
    noisy = run_channel(cfg, 200_000, 1).waveform
    noise = noisy.samples - clean.samples
    snr = 10 * np.log10(clean.power() / np.mean(np.sum(np.abs(noise) ** 2, axis=0)))
    assert snr == pytest.approx(expected_db, abs=0.05)


def test_channel_energy_preserving_ops():
    cfg = ChannelConfig.random(seed=6, noise_power_dbm=-np.inf)
    blk = run_channel(cfg, 2000, 1, noise=False)
    tx = pulse_shape(generate_symbols(2000 + GUARD_SAMPLES, 1), 10.0)
    assert blk.waveform.power() == pytest.approx(tx.power(), rel=0.02)


def test_pilot_block_read_only():
    blk = run_channel(_linear_channel(), 50, 1, noise=False)
    with pytest.raises(ValueError):
        blk.symbols[0, 0] = 0
    with pytest.raises(ValueError):
        run_channel(_linear_channel(), 0, 1)


def test_jwav_roundtrip(tmp_path):
    w = _rand_wf(33)
    p = tmp_path / "w.jwav"
    write_jwav(p, w)
    raw = p.read_bytes()
    assert raw[:4] == b"JWAV" and len(raw) == 32 + 33 * 32
    back = read_jwav(p)
    np.testing.assert_array_equal(back.samples, w.samples)
    assert back.baud == w.baud
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        read_jwav(p)

"""Tests for WAV I/O, the STFT pair, and observation normalization."""

import struct

import numpy as np
import pytest
import scipy.io.wavfile

from stmask.signal_io import (
    ComplexSpectrogram,
    MultichannelWaveform,
    StftConfig,
    istft,
    normalize_observations,
    read_wav,
    stft,
    write_wav,
)


# ---------------------------------------------------------------------------
# WAV codec


def test_read_zero_signal(tmp_path):
    path = tmp_path / "zeros.wav"
    wf = MultichannelWaveform(np.zeros((1, 160)), 16000)
    write_wav(path, wf, encoding="pcm16")
    back = read_wav(path)
    assert back.n_channels == 1
    assert back.n_samples == 160
    assert back.sample_rate == 16000
    assert np.all(back.samples == 0.0)


def test_float32_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 500)).astype(np.float32).astype(np.float64)
    path = tmp_path / "f32.wav"
    info = write_wav(path, MultichannelWaveform(x, 8000), encoding="float32")
    assert info.clipped == 0
    back = read_wav(path)
    assert back.sample_rate == 8000
    np.testing.assert_array_equal(back.samples, x)


def test_pcm16_fullscale_scaling_manual_file(tmp_path):
    # Hand-assembled file: the decoder contract is int16 / 32768.
    codes = np.array([32767, -32768, 0, 16384], dtype="<i2")
    payload = codes.tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, 16000, 32000, 2, 16)
    body = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    blob = b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body
    path = tmp_path / "manual.wav"
    path.write_bytes(blob)

    wf = read_wav(path)
    expected = np.array([32767 / 32768, -1.0, 0.0, 0.5])
    np.testing.assert_allclose(wf.samples[0], expected, atol=1e-9)


def test_pcm16_against_scipy_decoder(tmp_path):
    rng = np.random.default_rng(1)
    x = np.clip(rng.standard_normal((2, 400)) * 0.3, -0.999, 0.999)
    path = tmp_path / "x16.wav"
    write_wav(path, MultichannelWaveform(x, 16000), encoding="pcm16")

    sr, raw = scipy.io.wavfile.read(path)
    assert sr == 16000
    assert raw.dtype == np.int16
    np.testing.assert_array_equal(raw.T, np.round(x * 32768).astype(np.int16))


def test_pcm16_reading_scipy_written_file(tmp_path):
    rng = np.random.default_rng(2)
    codes = rng.integers(-32768, 32768, size=300, dtype=np.int16)
    path = tmp_path / "scipy16.wav"
    scipy.io.wavfile.write(path, 16000, codes)
    wf = read_wav(path)
    np.testing.assert_allclose(wf.samples[0], codes / 32768.0, atol=1e-12)


def test_pcm24_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    x = np.clip(rng.standard_normal((2, 257)) * 0.4, -0.99, 0.99)
    path = tmp_path / "x24.wav"
    info = write_wav(path, MultichannelWaveform(x, 44100), encoding="pcm24")
    assert info.clipped == 0
    back = read_wav(path)
    assert back.sample_rate == 44100
    np.testing.assert_allclose(back.samples, x, atol=2.0**-23)


def test_pcm24_known_codes(tmp_path):
    # -1.0, 0, and the largest positive code, decoded by hand.
    x = np.array([[-1.0, 0.0, (2**23 - 1) / 2**23]])
    path = tmp_path / "codes24.wav"
    write_wav(path, MultichannelWaveform(x, 16000), encoding="pcm24")
    blob = path.read_bytes()
    start = blob.index(b"data") + 8
    raw = np.frombuffer(blob[start : start + 9], dtype=np.uint8).reshape(3, 3)
    vals = (
        raw[:, 0].astype(np.int64)
        | (raw[:, 1].astype(np.int64) << 8)
        | (raw[:, 2].astype(np.int64) << 16)
    )
    vals = (vals ^ 0x800000) - 0x800000
    np.testing.assert_array_equal(vals, [-(2**23), 0, 2**23 - 1])


def test_integer_clipping_flagged(tmp_path):
    x = np.array([[0.0, 1.5, -2.0, 0.25]])
    path = tmp_path / "clip.wav"
    info = write_wav(path, MultichannelWaveform(x, 16000), encoding="pcm16")
    assert info.clipped == 2
    back = read_wav(path)
    # saturated values decode to the rails
    np.testing.assert_allclose(back.samples[0, 1], 32767 / 32768, atol=1e-9)
    np.testing.assert_allclose(back.samples[0, 2], -1.0, atol=1e-9)


def test_read_missing_file():
    with pytest.raises(OSError):
        read_wav("/nonexistent/nowhere.wav")


def test_read_non_wav(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"this is not audio")
    with pytest.raises(ValueError):
        read_wav(path)


def test_read_unsupported_bits(tmp_path):
    fmt = struct.pack("<HHIIHH", 1, 1, 16000, 16000, 1, 8)  # 8-bit PCM
    payload = bytes(range(10))
    body = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    blob = b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body
    path = tmp_path / "u8.wav"
    path.write_bytes(blob)
    with pytest.raises(ValueError, match="unsupported"):
        read_wav(path)


def test_read_zero_length_audio(tmp_path):
    fmt = struct.pack("<HHIIHH", 1, 1, 16000, 32000, 2, 16)
    body = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", 0)
    blob = b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body
    path = tmp_path / "empty.wav"
    path.write_bytes(blob)
    with pytest.raises(ValueError, match="zero-length"):
        read_wav(path)


def test_write_nonfinite_rejected(tmp_path):
    x = np.array([[0.0, np.nan]])
    with pytest.raises(ValueError):
        write_wav(tmp_path / "nan.wav", MultichannelWaveform(x, 16000))


# ---------------------------------------------------------------------------
# STFT


SMALL = StftConfig(window_length=512, dft_length=512, hop=128)


def test_stft_zero_input():
    wf = MultichannelWaveform(np.zeros((2, 4000)), 16000)
    spec = stft(wf, SMALL)
    assert spec.coefficients.shape == (2, spec.n_frames, 257)
    assert np.all(spec.coefficients == 0)


def test_stft_linearity():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, 5000))
    a = stft(MultichannelWaveform(x, 16000), SMALL).coefficients
    b = stft(MultichannelWaveform(2.5 * x, 16000), SMALL).coefficients
    np.testing.assert_allclose(b, 2.5 * a, rtol=1e-12, atol=1e-12)


def test_stft_sinusoid_peak_bin():
    sr = 16000
    bin_index = 10
    freq = bin_index * sr / SMALL.dft_length
    t = np.arange(sr) / sr
    x = np.cos(2 * np.pi * freq * t)
    spec = stft(MultichannelWaveform(x[None, :], sr), SMALL)
    mag = np.abs(spec.coefficients[0]).mean(axis=0)
    assert int(np.argmax(mag)) == bin_index
    # window sidelobes fall off quickly away from the peak
    far = np.concatenate([mag[: bin_index - 8], mag[bin_index + 9 :]])
    assert np.max(far) < 1e-2 * mag[bin_index]


def test_stft_too_short_raises():
    wf = MultichannelWaveform(np.zeros((1, 100)), 16000)
    with pytest.raises(ValueError, match="shorter"):
        stft(wf, SMALL)


@pytest.mark.parametrize(
    "config",
    [
        StftConfig(2048, 2048, 512),
        StftConfig(512, 512, 128),
        StftConfig(512, 1024, 256),
        StftConfig(400, 512, 100),
    ],
)
def test_roundtrip_interior(config):
    rng = np.random.default_rng(11)
    n = 6 * config.window_length
    x = rng.standard_normal((2, n))
    wf = MultichannelWaveform(x, 16000)
    back = istft(stft(wf, config)).samples
    assert back.shape == x.shape
    lo, hi = config.window_length, n - config.window_length
    err = np.linalg.norm(back[:, lo:hi] - x[:, lo:hi]) / np.linalg.norm(x[:, lo:hi])
    assert err <= 1e-6


def test_roundtrip_full_length_is_tight():
    # Edge samples are reconstructed too thanks to the half-window padding.
    rng = np.random.default_rng(12)
    x = rng.standard_normal((1, 4096))
    back = istft(stft(MultichannelWaveform(x, 16000), SMALL)).samples
    np.testing.assert_allclose(back, x, atol=1e-9)


def test_istft_zero_spectrogram():
    wf = MultichannelWaveform(np.zeros((1, 3000)), 16000)
    spec = stft(wf, SMALL)
    spec.coefficients[:] = 0
    out = istft(spec)
    assert out.n_samples == 3000
    assert np.all(out.samples == 0)


def test_istft_scaling_linearity():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((1, 4000))
    spec = stft(MultichannelWaveform(x, 16000), SMALL)
    half = ComplexSpectrogram(
        coefficients=0.5 * spec.coefficients,
        config=spec.config,
        n_samples=spec.n_samples,
        sample_rate=spec.sample_rate,
    )
    np.testing.assert_allclose(istft(half).samples, 0.5 * istft(spec).samples, atol=1e-12)


def test_istft_rejects_non_cola_hop():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((1, 4000))
    config = StftConfig(window_length=512, dft_length=512, hop=200)
    spec = stft(MultichannelWaveform(x, 16000), config)
    with pytest.raises(ValueError, match="overlap-add"):
        istft(spec)


def test_config_validation():
    with pytest.raises(ValueError):
        StftConfig(window_length=512, dft_length=256, hop=128)
    with pytest.raises(ValueError):
        StftConfig(window_length=512, dft_length=512, hop=0)
    with pytest.raises(ValueError):
        StftConfig(window_length=512, dft_length=512, hop=600)


# ---------------------------------------------------------------------------
# Observation normalization


def _spec_from_array(y):
    """Wrap a (channels, frames, bins) array as a spectrogram for testing."""
    m, t, f = y.shape
    config = StftConfig(window_length=2 * (f - 1), dft_length=2 * (f - 1), hop=(f - 1) // 2)
    return ComplexSpectrogram(coefficients=y, config=config, n_samples=1000)


def test_normalize_simple_vector():
    y = np.zeros((2, 1, 257), dtype=complex)
    y[:, 0, 0] = [2.0, 0.0]
    obs = normalize_observations(_spec_from_array(y))
    assert obs.valid[0, 0]
    np.testing.assert_allclose(obs.z[0, 0], [1.0, 0.0], atol=1e-15)


def test_normalize_threshold_excludes_quiet_bins():
    y = np.zeros((2, 2, 257), dtype=complex)
    y[0, 0, 0] = 1.0
    y[0, 1, 0] = 0.5e-3  # half the explicit threshold
    obs = normalize_observations(_spec_from_array(y), epsilon=1e-3)
    assert obs.valid[0, 0]
    assert not obs.valid[1, 0]
    assert np.all(obs.z[1, 0] == 0)


def test_normalize_unit_norm_and_validity():
    rng = np.random.default_rng(20)
    y = rng.standard_normal((3, 40, 129)) + 1j * rng.standard_normal((3, 40, 129))
    obs = normalize_observations(_spec_from_array(y))
    norms = np.linalg.norm(obs.z[obs.valid], axis=-1)
    assert np.max(np.abs(norms - 1.0)) <= 1e-12


def test_normalize_scale_invariance_with_default_threshold():
    rng = np.random.default_rng(21)
    y = rng.standard_normal((2, 30, 65)) + 1j * rng.standard_normal((2, 30, 65))
    y[:, 5, 5] *= 1e-12  # a quiet bin that must stay invalid on both sides
    a = normalize_observations(_spec_from_array(y))
    b = normalize_observations(_spec_from_array(100.0 * y))
    np.testing.assert_array_equal(a.valid, b.valid)
    np.testing.assert_allclose(a.z, b.z, atol=1e-12)


def test_normalize_per_bin_phase_invariance():
    rng = np.random.default_rng(22)
    y = rng.standard_normal((2, 10, 33)) + 1j * rng.standard_normal((2, 10, 33))
    # multiply every bin by its own complex scalar
    c = np.exp(1j * rng.uniform(0, 2 * np.pi, size=(10, 33))) * rng.uniform(
        0.5, 2.0, size=(10, 33)
    )
    a = normalize_observations(_spec_from_array(y))
    b = normalize_observations(_spec_from_array(y * c[None, :, :]))
    inner = np.abs(np.sum(np.conj(a.z) * b.z, axis=-1))
    np.testing.assert_allclose(inner[a.valid], 1.0, atol=1e-10)


def test_normalize_all_silent_allowed():
    y = np.zeros((2, 5, 17), dtype=complex)
    obs = normalize_observations(_spec_from_array(y))
    assert not obs.valid.any()

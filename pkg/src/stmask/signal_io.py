"""Waveform I/O, STFT analysis/synthesis, and observation normalization.

The WAV codec is self-contained (RIFF parsing with ``struct``) because the
package needs 16/24-bit integer PCM and 32-bit float support without pulling
in an audio backend.  Integer samples are mapped to floats by dividing by the
full-scale magnitude (``2**15`` or ``2**23``), so the most positive 16-bit
code becomes ``32767/32768``.

The STFT uses a square-root Hann analysis/synthesis pair.  With the hop
dividing the window length this pair satisfies the constant overlap-add
condition, so ``istft(stft(x))`` reconstructs ``x`` up to rounding error.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window

from .validation import check_complex_array, check_positive_int, check_real_array

__all__ = [
    "MultichannelWaveform",
    "StftConfig",
    "ComplexSpectrogram",
    "NormalizedObservations",
    "WavWriteInfo",
    "read_wav",
    "write_wav",
    "stft",
    "istft",
    "normalize_observations",
]


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class MultichannelWaveform:
    """Real time-domain signal, one row per channel."""

    samples: np.ndarray  # (n_channels, n_samples) float64
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(check_real_array(self.samples, "samples"))
        if self.samples.ndim != 2:
            raise ValueError("samples must be a (channels, time) matrix")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def n_channels(self):
        return self.samples.shape[0]

    @property
    def n_samples(self):
        return self.samples.shape[1]


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis parameters for the sliding-window transform."""

    window_length: int = 2048
    dft_length: int = 2048
    hop: int = 512
    window: str = "sqrt_hann"

    def __post_init__(self):
        check_positive_int(self.window_length, "window_length")
        check_positive_int(self.dft_length, "dft_length")
        check_positive_int(self.hop, "hop")
        if self.dft_length < self.window_length:
            raise ValueError("dft_length must be >= window_length")
        if self.hop > self.window_length:
            raise ValueError("hop must not exceed window_length")
        if self.window != "sqrt_hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self):
        return self.dft_length // 2 + 1

    def analysis_window(self):
        # Periodic Hann so that shifted squared windows can add to a constant.
        return np.sqrt(get_window("hann", self.window_length, fftbins=True))

    def overlap_add_deviation(self):
        """Max relative deviation of the overlap-added squared window from
        a constant, measured over a fully covered interior region."""
        w2 = self.analysis_window() ** 2
        n_frames = 8 * (self.window_length // self.hop + 1)
        total = np.zeros((n_frames - 1) * self.hop + self.window_length)
        for k in range(n_frames):
            total[k * self.hop : k * self.hop + self.window_length] += w2
        interior = total[self.window_length : -self.window_length]
        level = np.median(interior)
        return float(np.max(np.abs(interior - level)) / level)


@dataclass
class ComplexSpectrogram:
    """One-sided STFT coefficients, ``(channels, frames, bins)``."""

    coefficients: np.ndarray
    config: StftConfig
    n_samples: int  # original signal length, needed for exact trimming
    sample_rate: int = 16000

    def __post_init__(self):
        self.coefficients = check_complex_array(self.coefficients, "coefficients", ndim=3)
        if self.coefficients.shape[2] != self.config.n_bins:
            raise ValueError(
                f"expected {self.config.n_bins} frequency bins, "
                f"got {self.coefficients.shape[2]}"
            )

    @property
    def n_channels(self):
        return self.coefficients.shape[0]

    @property
    def n_frames(self):
        return self.coefficients.shape[1]

    @property
    def n_bins(self):
        return self.coefficients.shape[2]


@dataclass
class NormalizedObservations:
    """Unit-norm observation vectors per time-frequency bin.

    ``z`` has shape ``(frames, bins, channels)``; rows of invalid bins are
    zero.  ``valid`` marks bins whose original norm reached the threshold,
    and ``epsilon`` records the resolved absolute threshold.
    """

    z: np.ndarray
    valid: np.ndarray
    epsilon: float

    def __post_init__(self):
        self.z = check_complex_array(self.z, "z", ndim=3)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.z.shape[:2]:
            raise ValueError("valid mask shape must match (frames, bins)")
        norms = np.linalg.norm(self.z[self.valid], axis=-1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-12:
            raise ValueError("valid observations must have unit norm")


@dataclass(frozen=True)
class WavWriteInfo:
    """Returned by :func:`write_wav`; counts integer-PCM saturations."""

    clipped: int
    encoding: str


# ---------------------------------------------------------------------------
# WAV codec

_PCM16_SCALE = 2.0**15
_PCM24_SCALE = 2.0**23

# format tags in the fmt chunk
_FMT_PCM = 0x0001
_FMT_FLOAT = 0x0003
_FMT_EXTENSIBLE = 0xFFFE


def _iter_riff_chunks(blob):
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8 : pos + 8 + size]
        yield cid, body
        pos += 8 + size + (size & 1)  # chunks are word-aligned


def read_wav(path):
    """Read a PCM16/PCM24/float32 WAV file as a :class:`MultichannelWaveform`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise ValueError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    for cid, body in _iter_riff_chunks(blob):
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
    if fmt is None or data is None:
        raise ValueError(f"{path}: missing fmt or data chunk")

    tag, n_channels, sample_rate, _, block_align, bits = struct.unpack_from(
        "<HHIIHH", fmt, 0
    )
    if tag == _FMT_EXTENSIBLE:
        if len(fmt) < 26:
            raise ValueError(f"{path}: truncated extensible fmt chunk")
        # the first two bytes of the SubFormat GUID carry the real format tag
        (tag,) = struct.unpack_from("<H", fmt, 24)
    if n_channels < 1:
        raise ValueError(f"{path}: invalid channel count {n_channels}")

    if tag == _FMT_PCM and bits == 16:
        raw = np.frombuffer(data, dtype="<i2")
        x = raw.astype(np.float64) / _PCM16_SCALE
    elif tag == _FMT_PCM and bits == 24:
        raw = np.frombuffer(data, dtype=np.uint8)
        raw = raw[: (len(raw) // 3) * 3].reshape(-1, 3).astype(np.int64)
        vals = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        vals = (vals ^ 0x800000) - 0x800000  # sign extension
        x = vals.astype(np.float64) / _PCM24_SCALE
    elif tag == _FMT_FLOAT and bits == 32:
        x = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported encoding (format {tag}, {bits} bits)")

    if x.size == 0:
        raise ValueError(f"{path}: zero-length audio")
    n_frames = x.size // n_channels
    samples = x[: n_frames * n_channels].reshape(n_frames, n_channels).T
    return MultichannelWaveform(samples=samples, sample_rate=sample_rate)


def write_wav(path, waveform, encoding="float32"):
    """Write a waveform; returns :class:`WavWriteInfo` with the count of
    samples saturated by integer quantization."""
    if not isinstance(waveform, MultichannelWaveform):
        raise TypeError("waveform must be a MultichannelWaveform")
    x = waveform.samples.T  # interleave as (frames, channels)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot write non-finite samples")
    n_channels = waveform.n_channels

    clipped = 0
    if encoding == "pcm16":
        q = np.round(x * _PCM16_SCALE)
        clipped = int(np.count_nonzero((q > 32767) | (q < -32768)))
        payload = np.clip(q, -32768, 32767).astype("<i2").tobytes()
        tag, bits = _FMT_PCM, 16
    elif encoding == "pcm24":
        q = np.round(x * _PCM24_SCALE)
        hi = 2**23 - 1
        clipped = int(np.count_nonzero((q > hi) | (q < -(2**23))))
        vals = np.ascontiguousarray(np.clip(q, -(2**23), hi).astype("<i4"))
        payload = vals.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
        tag, bits = _FMT_PCM, 24
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _FMT_FLOAT, 32
    else:
        raise ValueError(f"unsupported encoding {encoding!r}")

    block_align = n_channels * bits // 8
    byte_rate = waveform.sample_rate * block_align
    fmt_chunk = struct.pack(
        "<HHIIHH", tag, n_channels, waveform.sample_rate, byte_rate, block_align, bits
    )
    chunks = [(b"fmt ", fmt_chunk)]
    if tag == _FMT_FLOAT:
        chunks.append((b"fact", struct.pack("<I", waveform.n_samples)))
    chunks.append((b"data", payload))

    body = b""
    for cid, chunk in chunks:
        body += cid + struct.pack("<I", len(chunk)) + chunk
        if len(chunk) & 1:
            body += b"\x00"
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)
    return WavWriteInfo(clipped=clipped, encoding=encoding)


# ---------------------------------------------------------------------------
# STFT


def _frame_starts(n_samples, config):
    # Half a window of zero padding on both ends; enough frames that the
    # last one reaches past the end of the padded signal.
    n_frames = 1 + int(np.ceil(n_samples / config.hop))
    return n_frames


def stft(waveform, config):
    """One-sided STFT with square-root Hann analysis window."""
    if not isinstance(waveform, MultichannelWaveform):
        raise TypeError("waveform must be a MultichannelWaveform")
    n = waveform.n_samples
    if n < config.window_length:
        raise ValueError(
            f"signal length {n} is shorter than one window ({config.window_length})"
        )
    win = config.analysis_window()
    pad = config.window_length // 2
    n_frames = _frame_starts(n, config)
    total = (n_frames - 1) * config.hop + config.window_length

    coefs = np.empty((waveform.n_channels, n_frames, config.n_bins), dtype=np.complex128)
    for ch in range(waveform.n_channels):
        padded = np.zeros(total)
        padded[pad : pad + n] = waveform.samples[ch]
        frames = np.lib.stride_tricks.sliding_window_view(padded, config.window_length)
        frames = frames[:: config.hop][:n_frames]
        coefs[ch] = np.fft.rfft(frames * win, n=config.dft_length, axis=-1)
    return ComplexSpectrogram(
        coefficients=coefs,
        config=config,
        n_samples=n,
        sample_rate=waveform.sample_rate,
    )


def istft(spectrogram):
    """Inverse STFT by windowed overlap-add; exact up to rounding for
    configurations whose squared window overlap-adds to a constant."""
    config = spectrogram.config
    dev = config.overlap_add_deviation()
    if dev > 1e-6:
        raise ValueError(
            f"window/hop pair does not satisfy overlap-add reconstruction "
            f"(deviation {dev:.3e})"
        )
    win = config.analysis_window()
    hop = config.hop
    n_frames = spectrogram.n_frames
    total = (n_frames - 1) * hop + config.window_length
    pad = config.window_length // 2

    denom = np.zeros(total)
    w2 = win**2
    for k in range(n_frames):
        denom[k * hop : k * hop + config.window_length] += w2
    denom = np.maximum(denom, 1e-12)

    out = np.empty((spectrogram.n_channels, spectrogram.n_samples))
    for ch in range(spectrogram.n_channels):
        frames = np.fft.irfft(spectrogram.coefficients[ch], n=config.dft_length, axis=-1)
        frames = frames[:, : config.window_length] * win
        acc = np.zeros(total)
        for k in range(n_frames):
            acc[k * hop : k * hop + config.window_length] += frames[k]
        out[ch] = (acc / denom)[pad : pad + spectrogram.n_samples]
    return MultichannelWaveform(samples=out, sample_rate=spectrogram.sample_rate)


# ---------------------------------------------------------------------------
# Observation normalization


def normalize_observations(spectrogram, epsilon=None):
    """Project each time-frequency observation onto the unit sphere.

    Bins whose norm falls below the threshold are marked invalid and carry a
    zero vector.  When ``epsilon`` is None the threshold defaults to
    ``1e-8`` times the largest bin norm of the recording, which makes the
    valid set invariant to global rescaling.
    """
    y = np.transpose(spectrogram.coefficients, (1, 2, 0))  # (frames, bins, channels)
    norms = np.linalg.norm(y, axis=-1)
    if epsilon is None:
        peak = float(norms.max()) if norms.size else 0.0
        epsilon = 1e-8 * peak if peak > 0 else 1e-8
    else:
        epsilon = float(epsilon)
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
    valid = norms >= epsilon
    z = np.zeros_like(y)
    np.divide(y, norms[..., None], out=z, where=valid[..., None])
    return NormalizedObservations(z=z, valid=valid, epsilon=epsilon)

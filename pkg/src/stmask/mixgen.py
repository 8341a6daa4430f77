"""Synthetic reverberant mixture generation and dataset manifests.

Impulse responses follow a simple stochastic model: one direct-path tap per
channel (at a randomly drawn delay, distinct across channels) followed by a
tail of independent Gaussian taps whose amplitude envelope decays
exponentially, reaching -60 dB at ``rt60`` seconds.  ``rt60 = 0`` produces
pure delay responses.  Users can instead supply measured impulse responses
as multichannel WAV files.

Datasets are described by a JSON-lines manifest: an optional first line
``{"manifest": {"seed": ..., "sample_rate": ...}}`` followed by one record
object per line with keys ``name``, ``sources`` (list of WAV paths),
``rir`` (either ``{"files": [...]}`` or ``{"synthetic": {...}}``), optional
``gains`` (null selects equal per-source image power) and ``seed`` (default
``manifest seed XOR record index``), plus a ``condition`` mapping of labels
(e.g. M, N, rt60).  :func:`materialize` writes, per record, a mixture WAV,
one reference WAV per source (the reverberated image at channel 0), and a
``metadata.json`` sidecar; everything is deterministic in the seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .signal_io import MultichannelWaveform, read_wav, write_wav
from .validation import check_positive_int, check_real_array, check_rng

__all__ = [
    "GeneratedMixture",
    "MixtureManifest",
    "MixtureRecord",
    "SyntheticRirConfig",
    "generate_mixture",
    "load_manifest",
    "materialize",
    "save_manifest",
    "synth_rir",
]

# Filters at or below this length are convolved directly (exact arithmetic
# for single-tap responses); longer tails go through FFT convolution.
_DIRECT_CONV_MAX_TAPS = 64

# Amplitude of the -60 dB point relative to the envelope start.
_DECAY_FLOOR = 1e-3

# Standard deviation of the first tail tap relative to the direct tap.
_TAIL_LEVEL = 0.35


@dataclass(frozen=True)
class SyntheticRirConfig:
    """Parameters of the stochastic impulse-response model."""

    n_channels: int
    n_sources: int
    rt60: float
    direct_delay_range: tuple = (0, 40)
    taps: int = 1024
    decay: str = "exponential"
    seed: int = 0
    sample_rate: int = 16000

    def __post_init__(self):
        check_positive_int(self.n_channels, "n_channels")
        check_positive_int(self.n_sources, "n_sources")
        check_positive_int(self.taps, "taps")
        check_positive_int(self.sample_rate, "sample_rate")
        if not np.isfinite(self.rt60) or self.rt60 < 0:
            raise ValueError("rt60 must be a finite nonnegative number")
        if self.decay != "exponential":
            raise ValueError(f"unsupported decay model {self.decay!r}")
        lo, hi = (int(v) for v in self.direct_delay_range)
        if not 0 <= lo < hi <= self.taps:
            raise ValueError(
                "direct_delay_range must satisfy 0 <= lo < hi <= taps"
            )
        if hi - lo < self.n_channels:
            raise ValueError(
                "direct_delay_range must span at least n_channels values "
                "so per-channel delays can differ"
            )
        object.__setattr__(self, "direct_delay_range", (lo, hi))


def synth_rir(config, rng=None):
    """Draw impulse responses, shape ``(n_sources, n_channels, taps)``.

    Each response has a unit direct-path tap (delays distinct across
    channels for every source) and, for ``rt60 > 0``, a Gaussian tail whose
    envelope reaches -60 dB at ``rt60`` seconds after the direct tap.
    """
    if not isinstance(config, SyntheticRirConfig):
        raise TypeError("config must be a SyntheticRirConfig")
    rng = check_rng(config.seed if rng is None else rng)
    n_src, n_ch, taps = config.n_sources, config.n_channels, config.taps
    lo, hi = config.direct_delay_range
    rirs = np.zeros((n_src, n_ch, taps))
    for n in range(n_src):
        delays = rng.choice(np.arange(lo, hi), size=n_ch, replace=False)
        for c in range(n_ch):
            d = int(delays[c])
            rirs[n, c, d] = 1.0
            if config.rt60 > 0 and d + 1 < taps:
                k = np.arange(1, taps - d, dtype=np.float64)
                envelope = _DECAY_FLOOR ** (
                    k / (config.rt60 * config.sample_rate)
                )
                tail = _TAIL_LEVEL * envelope * rng.standard_normal(k.size)
                rirs[n, c, d + 1 :] = tail
    return rirs


def _convolve_rows(sources, rirs):
    """Per-source, per-channel convolution, ``(N, M, len + taps - 1)``."""
    n_src, n_samples = sources.shape
    n_ch, taps = rirs.shape[1], rirs.shape[2]
    if taps <= _DIRECT_CONV_MAX_TAPS:
        out = np.empty((n_src, n_ch, n_samples + taps - 1))
        for n in range(n_src):
            for c in range(n_ch):
                out[n, c] = np.convolve(sources[n], rirs[n, c])
        return out
    return fftconvolve(sources[:, None, :], rirs, axes=-1)


@dataclass(frozen=True)
class GeneratedMixture:
    """Mixture ``(channels, samples)``, per-source images
    ``(sources, channels, samples)`` with gains folded in (so the mixture is
    exactly the sum of the images), and the gains used."""

    mixture: np.ndarray
    images: np.ndarray
    gains: np.ndarray


def generate_mixture(sources, rirs, gains=None):
    """Convolve sources with impulse responses and sum into a mixture.

    ``sources`` is ``(n_sources, n_samples)`` (or a list of equal-length
    single-channel signals) and ``rirs`` is ``(n_sources, n_channels,
    taps)``.  With ``gains=None``, per-source gains are chosen so every
    reverberated image has equal power at channel 0 (silent images keep
    gain 1); the resolved gains are returned.
    """
    if not isinstance(sources, np.ndarray):
        rows = [np.asarray(s, dtype=np.float64).ravel() for s in sources]
        if not rows:
            raise ValueError("sources must contain at least one signal")
        if len({row.size for row in rows}) != 1:
            raise ValueError("sources must share one common length")
        sources = np.stack(rows)
    sources = check_real_array(sources, "sources", ndim=2)
    rirs = check_real_array(rirs, "rirs", ndim=3)
    n_src = sources.shape[0]
    if rirs.shape[0] != n_src:
        raise ValueError(
            f"got {rirs.shape[0]} impulse responses for {n_src} sources"
        )
    raw = _convolve_rows(sources, rirs)
    if gains is None:
        powers = np.mean(raw[:, 0, :] ** 2, axis=-1)
        target = powers.mean()
        safe = np.where(powers > 0, powers, 1.0)
        gains = np.where(powers > 0, np.sqrt(target / safe), 1.0)
    else:
        gains = check_real_array(np.asarray(gains, dtype=np.float64), "gains", ndim=1)
        if gains.size != n_src:
            raise ValueError(f"expected {n_src} gains, got {gains.size}")
    images = gains[:, None, None] * raw
    mixture = images.sum(axis=0)
    return GeneratedMixture(mixture=mixture, images=images, gains=gains)


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class MixtureRecord:
    """One dataset entry: sources, an impulse-response origin (tuple of WAV
    paths or a synthetic config), optional gains, condition labels, and the
    resolved record seed."""

    name: str
    source_paths: tuple
    rir: object
    gains: tuple | None
    condition: dict
    seed: int


@dataclass(frozen=True)
class MixtureManifest:
    records: tuple
    seed: int = 0
    sample_rate: int = 16000


def _parse_record(obj, index, manifest_seed, line_no):
    def fail(msg):
        raise ValueError(f"manifest line {line_no}: {msg}")

    if not isinstance(obj, dict):
        fail("record must be a JSON object")
    sources = obj.get("sources")
    if not isinstance(sources, list) or not sources:
        fail("'sources' must be a nonempty list of paths")
    rir_spec = obj.get("rir")
    if not isinstance(rir_spec, dict) or len(rir_spec) != 1:
        fail("'rir' must be {'files': [...]} or {'synthetic': {...}}")
    if "files" in rir_spec:
        files = rir_spec["files"]
        if not isinstance(files, list) or len(files) != len(sources):
            fail("'rir.files' must list one path per source")
        rir = tuple(str(p) for p in files)
    elif "synthetic" in rir_spec:
        params = dict(rir_spec["synthetic"])
        params.setdefault("n_sources", len(sources))
        params.setdefault("seed", 0)
        if "direct_delay_range" in params:
            params["direct_delay_range"] = tuple(params["direct_delay_range"])
        try:
            rir = SyntheticRirConfig(**params)
        except (TypeError, ValueError) as exc:
            fail(f"bad synthetic rir config: {exc}")
        if rir.n_sources != len(sources):
            fail("synthetic rir n_sources must match the source count")
    else:
        fail("'rir' must be {'files': [...]} or {'synthetic': {...}}")
    gains = obj.get("gains")
    if gains is not None:
        if not isinstance(gains, list) or len(gains) != len(sources):
            fail("'gains' must be null or one value per source")
        gains = tuple(float(g) for g in gains)
    condition = obj.get("condition", {})
    if not isinstance(condition, dict):
        fail("'condition' must be an object of labels")
    seed = obj.get("seed")
    if seed is None:
        seed = manifest_seed ^ index
    return MixtureRecord(
        name=str(obj.get("name", f"mix{index:04d}")),
        source_paths=tuple(str(p) for p in sources),
        rir=rir,
        gains=gains,
        condition=dict(condition),
        seed=int(seed),
    )


def load_manifest(path):
    """Parse a JSON-lines manifest (see the module docstring for the schema)."""
    path = Path(path)
    lines = path.read_text().splitlines()
    manifest_seed = 0
    sample_rate = 16000
    records = []
    index = 0
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"manifest line {line_no}: invalid JSON ({exc})")
        if isinstance(obj, dict) and "manifest" in obj:
            if records or index:
                raise ValueError(
                    f"manifest line {line_no}: header must precede all records"
                )
            header = obj["manifest"]
            manifest_seed = int(header.get("seed", 0))
            sample_rate = int(header.get("sample_rate", 16000))
            continue
        records.append(_parse_record(obj, index, manifest_seed, line_no))
        index += 1
    return MixtureManifest(
        records=tuple(records), seed=manifest_seed, sample_rate=sample_rate
    )


def save_manifest(path, manifest):
    """Write a manifest in the JSON-lines layout read by :func:`load_manifest`."""
    if not isinstance(manifest, MixtureManifest):
        raise TypeError("manifest must be a MixtureManifest")
    lines = [
        json.dumps(
            {
                "manifest": {
                    "seed": manifest.seed,
                    "sample_rate": manifest.sample_rate,
                }
            },
            sort_keys=True,
        )
    ]
    for record in manifest.records:
        if isinstance(record.rir, SyntheticRirConfig):
            rir_obj = {
                "synthetic": {
                    "n_channels": record.rir.n_channels,
                    "n_sources": record.rir.n_sources,
                    "rt60": record.rir.rt60,
                    "direct_delay_range": list(record.rir.direct_delay_range),
                    "taps": record.rir.taps,
                    "decay": record.rir.decay,
                    "seed": record.rir.seed,
                    "sample_rate": record.rir.sample_rate,
                }
            }
        else:
            rir_obj = {"files": list(record.rir)}
        lines.append(
            json.dumps(
                {
                    "name": record.name,
                    "sources": list(record.source_paths),
                    "rir": rir_obj,
                    "gains": None if record.gains is None else list(record.gains),
                    "condition": record.condition,
                    "seed": record.seed,
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def _load_mono_sources(record, sample_rate):
    rows = []
    lengths = []
    for p in record.source_paths:
        wave = read_wav(p)
        if wave.n_channels != 1:
            raise ValueError(
                f"record {record.name!r}: source {p!r} must be single-channel"
            )
        if wave.sample_rate != sample_rate:
            raise ValueError(
                f"record {record.name!r}: source {p!r} sample rate "
                f"{wave.sample_rate} != manifest rate {sample_rate}"
            )
        rows.append(wave.samples[0])
        lengths.append(wave.n_samples)
    n = max(lengths)
    stacked = np.zeros((len(rows), n))
    for i, row in enumerate(rows):
        stacked[i, : row.size] = row
    return stacked, lengths


def _load_record_rirs(record, sample_rate):
    if isinstance(record.rir, SyntheticRirConfig):
        config = record.rir
        if config.sample_rate != sample_rate:
            raise ValueError(
                f"record {record.name!r}: synthetic rir sample rate "
                f"{config.sample_rate} != manifest rate {sample_rate}"
            )
        return synth_rir(config, np.random.default_rng(record.seed))
    mats = []
    for p in record.rir:
        wave = read_wav(p)
        if wave.sample_rate != sample_rate:
            raise ValueError(
                f"record {record.name!r}: rir {p!r} sample rate "
                f"{wave.sample_rate} != manifest rate {sample_rate}"
            )
        mats.append(wave.samples)
    n_ch = {m.shape[0] for m in mats}
    if len(n_ch) != 1:
        raise ValueError(
            f"record {record.name!r}: rir files disagree on channel count"
        )
    taps = max(m.shape[1] for m in mats)
    out = np.zeros((len(mats), mats[0].shape[0], taps))
    for i, m in enumerate(mats):
        out[i, :, : m.shape[1]] = m
    return out


def materialize(manifest, out_dir):
    """Write every manifest record as WAV files plus a metadata sidecar.

    Creates ``out_dir/<name>/`` containing ``mixture.wav`` (all channels),
    ``ref_XX.wav`` (the gain-folded source image at channel 0, one per
    source), and ``metadata.json``.  Deterministic given the manifest.
    Returns the list of metadata dictionaries.
    """
    if not isinstance(manifest, MixtureManifest):
        raise TypeError("manifest must be a MixtureManifest")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for record in manifest.records:
        try:
            sources, original_lengths = _load_mono_sources(
                record, manifest.sample_rate
            )
            rirs = _load_record_rirs(record, manifest.sample_rate)
        except FileNotFoundError as exc:
            raise FileNotFoundError(
                f"record {record.name!r}: {exc}"
            ) from exc
        if rirs.shape[0] != sources.shape[0]:
            raise ValueError(
                f"record {record.name!r}: {rirs.shape[0]} impulse responses "
                f"for {sources.shape[0]} sources"
            )
        generated = generate_mixture(sources, rirs, record.gains)
        rec_dir = out_dir / record.name
        rec_dir.mkdir(parents=True, exist_ok=True)
        mixture_path = rec_dir / "mixture.wav"
        write_wav(
            mixture_path,
            MultichannelWaveform(generated.mixture, manifest.sample_rate),
        )
        ref_paths = []
        for n in range(sources.shape[0]):
            ref_path = rec_dir / f"ref_{n:02d}.wav"
            write_wav(
                ref_path,
                MultichannelWaveform(
                    generated.images[n, :1], manifest.sample_rate
                ),
            )
            ref_paths.append(ref_path.name)
        meta = {
            "name": record.name,
            "condition": record.condition,
            "seed": record.seed,
            "sample_rate": manifest.sample_rate,
            "n_samples": int(generated.mixture.shape[1]),
            "n_channels": int(generated.mixture.shape[0]),
            "gains": [float(g) for g in generated.gains],
            "sources": list(record.source_paths),
            "source_lengths": [int(v) for v in original_lengths],
            "rir": "synthetic"
            if isinstance(record.rir, SyntheticRirConfig)
            else list(record.rir),
            "mixture": mixture_path.name,
            "references": ref_paths,
        }
        (rec_dir / "metadata.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n"
        )
        written.append(meta)
    return written

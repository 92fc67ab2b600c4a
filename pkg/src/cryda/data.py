"""In-memory datasets built from a synthetic corpus (generated or on disk)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dsp import AudioClip, FeatureConfig, log_mel_batch, read_wav
from .synthcorpus import DOMAINS, LABELS, SPLITS, CorpusConfig, iter_corpus, noise_recordings, read_manifest


class DataError(ValueError):
    pass


def quantize_pcm16(x: np.ndarray) -> np.ndarray:
    """Round-trip through 16-bit PCM so in-memory data matches WAV files exactly."""
    pcm = np.clip(np.round(np.asarray(x, dtype=np.float64) * 32767.0), -32768, 32767).astype(np.int16)
    return pcm.astype(np.float32) / np.float32(32767.0)


def featurize(waves: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Log-mel features ``[N, T, M]``, computed one row at a time.

    Row-wise evaluation makes each clip's features independent of which
    other clips share the batch.
    """
    waves = np.atleast_2d(waves)
    if len(waves) == 0:
        return np.zeros((0, cfg.n_frames(waves.shape[1]), cfg.n_mels), np.float32)
    return np.concatenate([log_mel_batch(w[None], cfg) for w in waves], axis=0)


def center_crop(waves: np.ndarray, length: int) -> np.ndarray:
    n = waves.shape[1]
    if n < length:
        return np.pad(waves, ((0, 0), (0, length - n)))
    off = (n - length) // 2
    return waves[:, off : off + length]


@dataclass
class Split:
    """Equal-length waveforms with labels (1 = injury) and patient ids."""

    waves: np.ndarray
    labels: np.ndarray
    patients: list
    ids: list = field(default_factory=list)
    _features: Optional[np.ndarray] = field(default=None, repr=False)
    _feature_cfg: Optional[FeatureConfig] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def features(self, cfg: FeatureConfig) -> np.ndarray:
        if self._features is None or self._feature_cfg != cfg:
            self._features = featurize(self.waves, cfg)
            self._feature_cfg = cfg
        return self._features

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        out = Split(self.waves[idx], self.labels[idx], [self.patients[i] for i in idx],
                    [self.ids[i] for i in idx] if self.ids else [])
        if self._features is not None:
            out._features, out._feature_cfg = self._features[idx], self._feature_cfg
        return out

    @staticmethod
    def concat(parts: list) -> "Split":
        return Split(
            np.concatenate([p.waves for p in parts]),
            np.concatenate([p.labels for p in parts]),
            sum((list(p.patients) for p in parts), []),
            sum((list(p.ids) for p in parts), []),
        )


@dataclass
class DomainData:
    train: Split
    valid: Split
    test: Split

    def split(self, name: str) -> Split:
        return getattr(self, name)


@dataclass
class ExperimentData:
    source: DomainData
    target: DomainData
    noise: dict  # domain -> list of AudioClip noise recordings
    feature_cfg: FeatureConfig = FeatureConfig()
    window: int = 48000

    def domain(self, name: str) -> DomainData:
        return getattr(self, name)


def _assemble(items: list, window: int) -> DomainData:
    parts = {}
    for split in SPLITS:
        sel = [it for it in items if it[1] == split]
        if not sel:
            raise DataError(f"split {split!r} is empty")
        waves = center_crop(np.stack([_pad(w, window) for w, *_ in sel]), window)
        parts[split] = Split(
            waves.astype(np.float32),
            np.array([LABELS.index(lab) for _, _, lab, _, _ in sel], dtype=np.int64),
            [pid for _, _, _, pid, _ in sel],
            [cid for *_, cid in sel],
        )
    return DomainData(**parts)


def _pad(w: np.ndarray, window: int) -> np.ndarray:
    # clips are stacked at a common length before cropping
    return w if len(w) >= window else np.pad(w, (0, window - len(w)))


def build_experiment_data(cfg: CorpusConfig, seed: int, feature_cfg: FeatureConfig = FeatureConfig(),
                          window_s: float = 3.0) -> ExperimentData:
    """Generate the corpus in memory, quantized exactly as the WAV writer would."""
    window = int(round(window_s * cfg.sample_rate))
    items: dict = {d: [] for d in DOMAINS}
    for item in iter_corpus(cfg, seed):
        r = item.row
        items[r.domain].append((quantize_pcm16(item.clip.samples), r.split, r.label, r.patient_id, item.clip.id))
    noise = {}
    for d in DOMAINS:
        recs = noise_recordings(cfg, seed, d)
        noise[d] = [AudioClip(quantize_pcm16(c.samples), c.sample_rate, c.id, c.metadata) for c in recs]
    return ExperimentData(_assemble(items["source"], window), _assemble(items["target"], window), noise,
                          feature_cfg, window)


def load_experiment_data(corpus_dir, feature_cfg: FeatureConfig = FeatureConfig(),
                         window_s: float = 3.0) -> ExperimentData:
    """Load a corpus written by :func:`cryda.synthcorpus.generate_corpus`."""
    root = Path(corpus_dir)
    manifest_path = root / "manifest.csv"
    if not manifest_path.exists():
        raise DataError(f"{root}: no manifest.csv (generate a corpus first)")
    manifest = read_manifest(manifest_path)
    items: dict = {d: [] for d in DOMAINS}
    sr = None
    for r in manifest.rows:
        clip = read_wav(root / r.path, Path(r.path).stem)
        sr = clip.sample_rate
        if r.domain not in items:
            raise DataError(f"unknown domain {r.domain!r} in manifest")
        items[r.domain].append((clip.samples, r.split, r.label, r.patient_id, clip.id))
    window = int(round(window_s * (sr or feature_cfg.sample_rate)))
    noise: dict = {d: [] for d in DOMAINS}
    noise_csv = root / "noise.csv"
    if noise_csv.exists():
        with open(noise_csv, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                clip = read_wav(root / rec["path"], Path(rec["path"]).stem)
                clip.metadata.update(domain=rec["domain"], kind="noise")
                noise[rec["domain"]].append(clip)
    return ExperimentData(_assemble(items["source"], window), _assemble(items["target"], window), noise,
                          feature_cfg, window)

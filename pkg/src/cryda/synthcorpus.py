"""Deterministic two-domain synthetic cry corpus.

Class acoustics (pitch level, contour, jitter) are drawn from the same
distributions in both domains; the domains differ only in background noise
and recording channel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal
from scipy.special import ndtri

from .dsp import AudioClip, detect_activity, write_wav

LABELS = ("healthy", "injury")
SPLITS = ("train", "valid", "test")
DOMAINS = ("source", "target")
MANIFEST_COLUMNS = ("path", "patient_id", "label", "domain", "split")


class ConfigError(ValueError):
    pass


class ManifestParseError(ValueError):
    pass


def stream(*key) -> np.random.Generator:
    """Independent generator keyed by a tuple of ints/strings."""
    ints = []
    for k in key:
        if isinstance(k, str):
            ints.append(int.from_bytes(k.encode("utf-8")[:8].ljust(8, b"\0"), "little"))
        else:
            ints.append(int(k))
    return np.random.default_rng(ints)


# ---------------------------------------------------------------------- cries


@dataclass(frozen=True)
class CryParams:
    f0_mean: float = 450.0
    f0_contour: str = "arc"
    jitter: float = 0.01
    n_harmonics: int = 10
    expiration_dur: float = 1.0
    n_expirations: int = 2
    gap_dur: float = 0.5
    lead: float = 0.25
    duration: Optional[float] = None
    contour_depth: float = 0.15
    sample_rate: int = 16000

    def validate(self) -> None:
        if not 250 <= self.f0_mean <= 800:
            raise ValueError(f"f0_mean {self.f0_mean} outside [250, 800] Hz")
        if not 0 <= self.jitter <= 0.1:
            raise ValueError(f"jitter {self.jitter} outside [0, 0.1]")
        if self.f0_contour not in ("arc", "flat", "falling"):
            raise ValueError(f"unknown contour {self.f0_contour!r}")
        if self.n_harmonics < 1 or self.n_expirations < 1 or self.expiration_dur <= 0:
            raise ValueError("n_harmonics, n_expirations and expiration_dur must be positive")
        if self.gap_dur < 0 or self.lead < 0:
            raise ValueError("gap_dur and lead must be >= 0")

    @property
    def total_duration(self) -> float:
        if self.duration is not None:
            return self.duration
        return 2 * self.lead + self.n_expirations * self.expiration_dur + (self.n_expirations - 1) * self.gap_dur


def expiration_spans(params: CryParams) -> list:
    sr = params.sample_rate
    n_total = int(round(params.total_duration * sr))
    spans = []
    for e in range(params.n_expirations):
        start = int(round((params.lead + e * (params.expiration_dur + params.gap_dur)) * sr))
        end = min(start + int(round(params.expiration_dur * sr)), n_total)
        if end > start:
            spans.append((start, end))
    return spans


JITTER_KNOT = 0.02  # seconds between independent jitter draws


def _contour(kind: str, u: np.ndarray, depth: float) -> np.ndarray:
    # zero-mean shapes so the expiration-average f0 equals f0_mean when jitter is 0
    if kind == "arc":
        return 1.0 + depth * (np.sin(np.pi * u) - 2.0 / np.pi)
    if kind == "falling":
        return 1.0 + depth * (0.5 - u)
    return np.ones_like(u)


def f0_track(params: CryParams, seed) -> np.ndarray:
    """Per-sample instantaneous f0 (0 outside expirations) used by :func:`synth_cry`."""
    params.validate()
    sr = params.sample_rate
    rng = stream(*np.atleast_1d(seed), 11)
    track = np.zeros(int(round(params.total_duration * sr)))
    for start, end in expiration_spans(params):
        L = end - start
        u = np.linspace(0.0, 1.0, L)
        knots = rng.standard_normal(int(L / (JITTER_KNOT * sr)) + 2)
        eta = np.interp(np.arange(L) / (JITTER_KNOT * sr), np.arange(len(knots)), knots)
        track[start:end] = params.f0_mean * _contour(params.f0_contour, u, params.contour_depth) * (1.0 + params.jitter * eta)
    return track


def _envelope(L: int, sr: int) -> np.ndarray:
    env = np.ones(L)
    a, r = min(int(0.04 * sr), L // 2), min(int(0.08 * sr), L // 2)
    env[:a] = 0.5 - 0.5 * np.cos(np.pi * np.arange(a) / a)
    env[L - r :] = 0.5 + 0.5 * np.cos(np.pi * np.arange(1, r + 1) / r)
    return env


def synth_cry(params: CryParams, seed) -> AudioClip:
    """Harmonic cry: 1/k harmonic rolloff, per-expiration envelope, silent gaps.

    Metadata carries the ground-truth per-sample ``f0_track`` and
    ``voicing_mask``.
    """
    params.validate()
    sr = params.sample_rate
    f0 = f0_track(params, seed)
    rng = stream(*np.atleast_1d(seed), 12)
    x = np.zeros_like(f0)
    for start, end in expiration_spans(params):
        seg = f0[start:end]
        phase = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.cumsum(seg) / sr
        s = np.zeros(end - start)
        for k in range(1, params.n_harmonics + 1):
            s += np.where(k * seg < 0.45 * sr, np.sin(k * phase) / k, 0.0)
        x[start:end] = s * _envelope(end - start, sr)
    peak = np.abs(x).max()
    if peak > 0:
        x *= 0.9 / peak
    return AudioClip(
        x.astype(np.float32),
        sr,
        metadata={"f0_track": f0.astype(np.float32), "voicing_mask": f0 > 0, "params": params},
    )


# -------------------------------------------------------------------- domains


@dataclass(frozen=True)
class Biquad:
    kind: str
    freq: float
    q: float = 0.7071
    gain_db: float = 0.0

    def sos(self, sr: int) -> np.ndarray:
        """RBJ audio-EQ-cookbook coefficients as one second-order section."""
        w0 = 2 * np.pi * self.freq / sr
        cw, sw = np.cos(w0), np.sin(w0)
        alpha = sw / (2 * self.q)
        A = 10 ** (self.gain_db / 40)
        if self.kind == "lowpass":
            b = [(1 - cw) / 2, 1 - cw, (1 - cw) / 2]
            a = [1 + alpha, -2 * cw, 1 - alpha]
        elif self.kind == "highpass":
            b = [(1 + cw) / 2, -(1 + cw), (1 + cw) / 2]
            a = [1 + alpha, -2 * cw, 1 - alpha]
        elif self.kind == "peaking":
            b = [1 + alpha * A, -2 * cw, 1 - alpha * A]
            a = [1 + alpha / A, -2 * cw, 1 - alpha / A]
        elif self.kind in ("lowshelf", "highshelf"):
            sq = 2 * np.sqrt(A) * alpha
            sgn = 1 if self.kind == "lowshelf" else -1
            b = [A * ((A + 1) - sgn * (A - 1) * cw + sq), sgn * 2 * A * ((A - 1) - sgn * (A + 1) * cw),
                 A * ((A + 1) - sgn * (A - 1) * cw - sq)]
            a = [(A + 1) + sgn * (A - 1) * cw + sq, -sgn * 2 * ((A - 1) + sgn * (A + 1) * cw),
                 (A + 1) + sgn * (A - 1) * cw - sq]
        else:
            raise ValueError(f"unknown biquad kind {self.kind!r}")
        b, a = np.array(b) / a[0], np.array(a) / a[0]
        return np.concatenate([b, a])[None, :]


@dataclass(frozen=True)
class DomainProfile:
    id: str
    noise_kind: str
    channel: tuple = ()
    snr_db_range: tuple = (5.0, 20.0)
    hum_freq: float = 50.0
    hum_level_db: float = -6.0

    def filter(self, x: np.ndarray, sr: int) -> np.ndarray:
        y = np.asarray(x, dtype=np.float64)
        if self.channel:
            y = signal.sosfilt(np.concatenate([bq.sos(sr) for bq in self.channel]), y)
        return y


PROFILES = {
    "hospital_a": DomainProfile(
        "hospital_a", "pink+hum50",
        channel=(Biquad("lowpass", 5000.0, 0.7071), Biquad("lowshelf", 400.0, 0.7071, 4.0)),
        hum_freq=50.0, hum_level_db=20.0,
    ),
    "hospital_b": DomainProfile(
        "hospital_b", "babble-mod+hum60",
        channel=(Biquad("highpass", 500.0, 0.7071), Biquad("peaking", 2500.0, 1.0, 6.0)),
        hum_freq=60.0,
    ),
}


def _shaped(rng: np.random.Generator, n: int, sr: int, gain_fn) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    return np.fft.irfft(spec * gain_fn(f), n=n)


def _unit_rms(x: np.ndarray) -> np.ndarray:
    r = np.sqrt(np.mean(x**2))
    return x / r if r > 0 else x


def render_noise(profile: DomainProfile, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS background noise for ``profile`` (before the channel filter)."""
    kind = profile.noise_kind.split("+")[0]
    if kind == "pink":
        bed = _shaped(rng, n, sr, lambda f: 1.0 / np.sqrt(np.maximum(f, 20.0)))
    elif kind == "babble-mod":
        bed = np.zeros(n)
        t = np.arange(n) / sr
        for _ in range(6):
            centre = rng.uniform(1200, 3500)
            voice = _shaped(rng, n, sr, lambda f, c=centre: np.exp(-0.5 * (np.log(np.maximum(f, 1.0) / c) / 0.6) ** 2))
            rate = rng.uniform(3.0, 6.0)
            env = 1.0 + 0.8 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
            bed += _unit_rms(voice) * env
    elif kind == "white":
        bed = rng.standard_normal(n)
    else:
        raise ValueError(f"unknown noise kind {profile.noise_kind!r}")
    bed = _unit_rms(bed)
    if "hum" in profile.noise_kind:
        t = np.arange(n) / sr
        hum = sum(np.sin(2 * np.pi * h * profile.hum_freq * t + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 5))
        bed = bed + _unit_rms(hum) * 10 ** (profile.hum_level_db / 20)
    return _unit_rms(bed)


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64)))) if len(x) else 0.0


def active_mask(clip: AudioClip) -> np.ndarray:
    mask = clip.metadata.get("voicing_mask")
    if mask is not None:
        return np.asarray(mask, dtype=bool)
    mask = np.zeros(len(clip), dtype=bool)
    for seg in detect_activity(clip):
        mask[seg.start : seg.end] = True
    return mask if mask.any() else np.ones(len(clip), dtype=bool)


def apply_domain(clip: AudioClip, profile: DomainProfile, snr_db: float, seed) -> AudioClip:
    """Channel-filter the clip and its background noise, mixing at ``snr_db``
    measured over the clip's active samples."""
    lo, hi = profile.snr_db_range
    if not lo - 1e-9 <= snr_db <= hi + 1e-9:
        raise ValueError(f"snr {snr_db} dB outside profile range {profile.snr_db_range}")
    sr = clip.sample_rate
    mask = active_mask(clip)
    clean = profile.filter(clip.samples, sr)
    noise = profile.filter(render_noise(profile, len(clip), sr, stream(*np.atleast_1d(seed), 21)), sr)
    sig_rms = _rms(clean[mask])
    noise = noise * (sig_rms / (_rms(noise[mask]) * 10 ** (snr_db / 20)))
    mix = clean + noise
    gain = 1.0
    peak = np.abs(mix).max()
    if peak > 1.0:
        gain = 0.999 / peak
        mix *= gain
    meta = dict(clip.metadata)
    meta.update(domain=profile.id, snr_db=20 * np.log10(sig_rms / _rms(noise[mask])), gain=gain)
    return AudioClip(mix.astype(np.float32), sr, clip.id, meta)


def noise_recording(profile: DomainProfile, duration: float, level_db: float, seed, sr: int = 16000) -> AudioClip:
    """Room noise without any cry, through the profile's channel, at ``level_db`` dBFS RMS."""
    n = int(round(duration * sr))
    x = profile.filter(render_noise(profile, n, sr, stream(*np.atleast_1d(seed), 31)), sr)
    x = _unit_rms(x) * 10 ** (level_db / 20)
    return AudioClip(x.astype(np.float32), sr, metadata={"domain": profile.id, "kind": "noise"})


# --------------------------------------------------------------------- corpus


@dataclass(frozen=True)
class ClassSpec:
    f0_mean: float
    f0_sd: float
    contour: str
    jitter: float


@dataclass(frozen=True)
class CorpusConfig:
    patients_per_domain: int = 60
    clips_per_patient: int = 5
    clip_duration: float = 3.0
    injury_prior: float = 0.5
    split_fractions: tuple = (0.6, 0.2, 0.2)
    sample_rate: int = 16000
    source_profile: str = "hospital_a"
    target_profile: str = "hospital_b"
    healthy: ClassSpec = ClassSpec(450.0, 50.0, "arc", 0.01)
    injury: ClassSpec = ClassSpec(600.0, 60.0, "flat", 0.04)
    within_patient_sd: float = 15.0
    n_harmonics: int = 10
    n_noise_recordings: int = 30
    noise_recording_duration: float = 3.0
    noise_recording_level_db: float = -16.0

    def profiles(self) -> dict:
        return {"source": PROFILES[self.source_profile], "target": PROFILES[self.target_profile]}

    def validate(self) -> None:
        fr = self.split_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-6:
            raise ConfigError(f"split fractions {fr} must be three non-negative numbers summing to 1")
        if not 0 < self.injury_prior < 1:
            raise ConfigError(f"injury_prior {self.injury_prior} must lie in (0, 1)")
        for name in (self.source_profile, self.target_profile):
            if name not in PROFILES:
                raise ConfigError(f"unknown domain profile {name!r}; known: {sorted(PROFILES)}")
        for label, n in self.class_counts().items():
            counts = _split_counts(n, fr)
            if min(counts) < 1:
                raise ConfigError(f"split fractions {fr} leave an empty split for {n} {label} patients")

    def class_counts(self) -> dict:
        n_inj = int(round(self.injury_prior * self.patients_per_domain))
        return {"healthy": self.patients_per_domain - n_inj, "injury": n_inj}


def _split_counts(n: int, fractions) -> list:
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return [n_train, n_valid, n - n_train - n_valid]


@dataclass(frozen=True)
class ManifestRow:
    path: str
    patient_id: str
    label: str
    domain: str
    split: str


@dataclass
class CorpusManifest:
    rows: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        return isinstance(other, CorpusManifest) and self.rows == other.rows

    def select(self, domain: Optional[str] = None, split: Optional[str] = None) -> list:
        return [r for r in self.rows if (domain is None or r.domain == domain) and (split is None or r.split == split)]

    def check_patient_disjoint(self) -> bool:
        seen: dict = {}
        for r in self.rows:
            if seen.setdefault(r.patient_id, r.split) != r.split:
                return False
        return True

    def class_balance(self) -> dict:
        out = {}
        for d in sorted({r.domain for r in self.rows}):
            for s in SPLITS:
                rows = self.select(d, s)
                if rows:
                    out[(d, s)] = sum(r.label == "injury" for r in rows) / len(rows)
        return out


def write_manifest(manifest: CorpusManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in manifest.rows:
            w.writerow([r.path, r.patient_id, r.label, r.domain, r.split])


def read_manifest(path) -> CorpusManifest:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestParseError(f"{path}: empty manifest (line 1)") from None
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestParseError(f"{path}: line 1: missing column(s) {', '.join(missing)}")
        pos = {c: header.index(c) for c in MANIFEST_COLUMNS}
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise ManifestParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(rec)}")
            row = ManifestRow(*(rec[pos[c]] for c in MANIFEST_COLUMNS))
            if row.label not in LABELS:
                raise ManifestParseError(f"{path}: line {lineno}: bad label {row.label!r}")
            if row.split not in SPLITS:
                raise ManifestParseError(f"{path}: line {lineno}: bad split {row.split!r}")
            rows.append(row)
    return CorpusManifest(rows)


@dataclass
class CorpusClip:
    row: ManifestRow
    clip: AudioClip


def _patient_plan(cfg: CorpusConfig, seed: int, d_idx: int) -> list:
    """(patient index, label, split, patient f0 base) for one domain."""
    counts = cfg.class_counts()
    labels = ["healthy"] * counts["healthy"] + ["injury"] * counts["injury"]
    order = stream(seed, d_idx, "labels").permutation(cfg.patients_per_domain)
    plan = [None] * cfg.patients_per_domain
    for label in LABELS:
        spec = cfg.healthy if label == "healthy" else cfg.injury
        members = [int(order[i]) for i, lab in enumerate(labels) if lab == label]
        n = len(members)
        rng = stream(seed, d_idx, label)
        split_of = np.repeat(np.arange(3), _split_counts(n, cfg.split_fractions))
        split_of = split_of[rng.permutation(n)]
        # stratified quantiles keep both domains' pitch distributions close to the class law
        u = (rng.permutation(n) + rng.uniform(size=n)) / n
        between_sd = math.sqrt(max(spec.f0_sd**2 - cfg.within_patient_sd**2, 0.0))
        bases = spec.f0_mean + between_sd * ndtri(u)
        for j, p in enumerate(members):
            plan[p] = (p, label, SPLITS[split_of[j]], float(bases[j]))
    return plan


def clip_params(cfg: CorpusConfig, label: str, base_f0: float, rng: np.random.Generator) -> CryParams:
    spec = cfg.healthy if label == "healthy" else cfg.injury
    f0 = float(np.clip(base_f0 + cfg.within_patient_sd * rng.standard_normal(), 250.0, 800.0))
    return CryParams(
        f0_mean=f0,
        f0_contour=spec.contour,
        jitter=spec.jitter,
        n_harmonics=cfg.n_harmonics,
        expiration_dur=float(rng.uniform(0.85, 1.05)),
        n_expirations=2,
        gap_dur=float(rng.uniform(0.3, 0.5)),
        lead=float(rng.uniform(0.1, 0.25)),
        duration=cfg.clip_duration,
        sample_rate=cfg.sample_rate,
    )


def iter_corpus(cfg: CorpusConfig, seed: int):
    """Yield :class:`CorpusClip` items in manifest order; pure in (cfg, seed)."""
    cfg.validate()
    for d_idx, domain in enumerate(DOMAINS):
        profile = cfg.profiles()[domain]
        for p, label, split, base in _patient_plan(cfg, seed, d_idx):
            pid = f"{domain[0]}{p:04d}"
            for c in range(cfg.clips_per_patient):
                key = (seed, d_idx, p, c)
                rng = stream(*key, 1)
                params = clip_params(cfg, label, base, rng)
                snr = float(rng.uniform(*profile.snr_db_range))
                clean = synth_cry(params, key)
                clip = apply_domain(clean, profile, snr, key)
                clip.id = f"{pid}_{c}"
                clip.metadata.update(patient_id=pid, label=label, split=split)
                row = ManifestRow(f"audio/{domain}/{pid}_{c}.wav", pid, label, domain, split)
                yield CorpusClip(row, clip)


def noise_recordings(cfg: CorpusConfig, seed: int, domain: str) -> list:
    profile = cfg.profiles()[domain]
    d_idx = DOMAINS.index(domain)
    out = []
    for i in range(cfg.n_noise_recordings):
        rec = noise_recording(profile, cfg.noise_recording_duration, cfg.noise_recording_level_db,
                              (seed, d_idx, 10_000 + i), cfg.sample_rate)
        rec.id = f"{domain}_noise_{i:03d}"
        out.append(rec)
    return out


def generate_corpus(cfg: CorpusConfig, seed: int, out_dir=None) -> CorpusManifest:
    """Synthesize the corpus; with ``out_dir``, write WAVs, ``manifest.csv`` and ``noise.csv``."""
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    for item in iter_corpus(cfg, seed):
        rows.append(item.row)
        if out is not None:
            path = out / item.row.path
            path.parent.mkdir(parents=True, exist_ok=True)
            write_wav(path, item.clip)
    manifest = CorpusManifest(rows)
    if out is not None:
        write_manifest(manifest, out / "manifest.csv")
        with open(out / "noise.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "domain"])
            for domain in DOMAINS:
                for rec in noise_recordings(cfg, seed, domain):
                    rel = f"noise/{domain}/{rec.id}.wav"
                    (out / rel).parent.mkdir(parents=True, exist_ok=True)
                    write_wav(out / rel, rec)
                    w.writerow([rel, domain])
    return manifest


def with_profiles(cfg: CorpusConfig, source: str, target: str) -> CorpusConfig:
    return replace(cfg, source_profile=source, target_profile=target)

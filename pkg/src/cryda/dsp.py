"""Audio front-end: STFT, log-mel features, YIN pitch, energy-based activity detection."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np
from scipy import signal

LOG_FLOOR = 1e-10


class EmptyOutputError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = 16000
    id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    n_fft: int = 512
    win_length: int = 400
    hop: int = 320
    n_mels: int = 32
    fmin: float = 50.0
    fmax: float = 8000.0

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            return 0
        return (n_samples - self.win_length) // self.hop + 1


@dataclass
class SpectrogramFeatures:
    frames: np.ndarray  # [T, n_mels]
    frame_rate: float
    source_id: str = ""


@dataclass
class PitchTrack:
    f0: np.ndarray  # Hz; 0 where unvoiced
    voiced: np.ndarray
    confidence: np.ndarray
    times: np.ndarray

    def voiced_f0(self) -> np.ndarray:
        return self.f0[self.voiced]


class Segment(NamedTuple):
    start: int
    end: int
    kind: str = "activity"


def _samples(clip: Union[AudioClip, np.ndarray]) -> np.ndarray:
    return clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float32)


def frame_signal(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    if len(x) < frame:
        return np.zeros((0, frame), dtype=x.dtype)
    n = (len(x) - frame) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, frame)[: (n - 1) * hop + 1 : hop]


def hann(n: int) -> np.ndarray:
    # periodic Hann, the usual STFT choice
    return (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)).astype(np.float64)


def stft(clip, n_fft: int = 512, win_length: int = 400, hop: int = 160) -> np.ndarray:
    """One-sided complex spectrogram ``[T, n_fft//2 + 1]`` of Hann-windowed frames.

    Frames start at sample 0 with no centre padding; each windowed frame is
    zero-padded to ``n_fft``.
    """
    if win_length > n_fft:
        raise ValueError(f"win_length {win_length} exceeds n_fft {n_fft}")
    if hop <= 0:
        raise ValueError(f"hop must be positive, got {hop}")
    x = _samples(clip).astype(np.float64)
    if len(x) < win_length:
        raise EmptyOutputError(f"clip of {len(x)} samples is shorter than the {win_length}-sample window")
    frames = frame_signal(x, win_length, hop) * hann(win_length)
    return np.fft.rfft(frames, n=n_fft, axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Peak frequencies of the triangular filters (equally spaced in mel)."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def mel_filterbank(n_fft: int = 512, n_mels: int = 64, sample_rate: int = 16000,
                   fmin: float = 50.0, fmax: float = 8000.0) -> np.ndarray:
    """Triangular mel filters ``[n_mels, n_fft//2 + 1]`` with unit peaks."""
    if not (0 <= fmin < fmax <= sample_rate / 2):
        raise ValueError(f"need 0 <= fmin < fmax <= sr/2, got fmin={fmin}, fmax={fmax}, sr={sample_rate}")
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / (mid - lo)
    down = (hi - bins[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down)).astype(np.float32)


_FB_CACHE: dict = {}


def _cached_filterbank(cfg: FeatureConfig) -> np.ndarray:
    key = (cfg.n_fft, cfg.n_mels, cfg.sample_rate, cfg.fmin, cfg.fmax)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(cfg.n_fft, cfg.n_mels, cfg.sample_rate, cfg.fmin, cfg.fmax).astype(np.float64)
    return _FB_CACHE[key]


def log_mel(clip, cfg: FeatureConfig = FeatureConfig()) -> SpectrogramFeatures:
    """Natural-log mel power ``ln(mel + 1e-10)``, shape ``[T, n_mels]``."""
    spec = stft(clip, cfg.n_fft, cfg.win_length, cfg.hop)
    power = spec.real**2 + spec.imag**2
    mel = power @ _cached_filterbank(cfg).T
    sid = clip.id if isinstance(clip, AudioClip) else ""
    return SpectrogramFeatures(np.log(mel + LOG_FLOOR).astype(np.float32), cfg.sample_rate / cfg.hop, sid)


def log_mel_batch(signals: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log-mel features for a ``[B, n]`` array of equal-length signals."""
    x = np.asarray(signals, dtype=np.float64)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length, axis=1)
    n = cfg.n_frames(x.shape[1])
    if n == 0:
        raise EmptyOutputError("signals shorter than the analysis window")
    frames = frames[:, : (n - 1) * cfg.hop + 1 : cfg.hop] * hann(cfg.win_length)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=2)
    power = spec.real**2 + spec.imag**2
    return np.log(power @ _cached_filterbank(cfg).T + LOG_FLOOR).astype(np.float32)


# ---------------------------------------------------------------------- pitch


def estimate_pitch(clip, fmin: float = 250.0, fmax: float = 1000.0, frame: int = 512, hop: int = 160,
                   threshold: float = 0.15, sample_rate: Optional[int] = None,
                   prefilter: Optional[tuple] = (200.0, 1500.0)) -> PitchTrack:
    """YIN f0 tracker: cumulative-mean-normalized difference, absolute
    threshold, then parabolic interpolation around the chosen lag.

    The signal is first band-passed (zero phase) to ``prefilter``; the upper
    edge is raised to 1.5 * fmax when needed.
    """
    sr = clip.sample_rate if isinstance(clip, AudioClip) else (sample_rate or 16000)
    if fmin < 50:
        raise ValueError(f"fmin must be >= 50 Hz, got {fmin}")
    if fmax > sr / 2:
        raise ValueError(f"fmax {fmax} exceeds Nyquist {sr / 2}")
    if fmax / fmin < 2:
        raise ValueError(f"fmax/fmin must be >= 2, got {fmax / fmin:.3f}")
    if frame < 2 * sr / fmin:
        raise ValueError(f"frame of {frame} samples is shorter than 2/fmin = {2 * sr / fmin:.0f} samples")
    x = _samples(clip).astype(np.float64)
    if prefilter is not None and len(x) > 64:
        lo, hi = prefilter[0], max(prefilter[1], 1.5 * fmax)
        lo = min(lo, 0.8 * fmin)
        if hi < sr / 2:
            sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
        else:
            sos = signal.butter(4, lo, btype="highpass", fs=sr, output="sos")
        x = signal.sosfiltfilt(sos, x)
    tau_min = max(2, int(np.floor(sr / fmax)))
    tau_max = int(np.ceil(sr / fmin))
    W = frame - tau_max
    frames = frame_signal(x, frame, hop)
    n = len(frames)
    times = (np.arange(n) * hop + frame / 2) / sr
    if n == 0:
        z = np.zeros(0)
        return PitchTrack(z, z.astype(bool), z, z)

    nfft = 1 << int(np.ceil(np.log2(frame + W)))
    full = np.fft.rfft(frames, n=nfft, axis=1)
    head = np.fft.rfft(frames[:, :W], n=nfft, axis=1)
    cross = np.fft.irfft(full * np.conj(head), n=nfft, axis=1)[:, : tau_max + 1]
    sq = np.concatenate([np.zeros((n, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    e_head = sq[:, W][:, None]
    taus = np.arange(tau_max + 1)
    e_lag = sq[:, taus + W] - sq[:, taus]
    diff = np.maximum(e_head + e_lag - 2 * cross, 0.0)
    diff[:, 0] = 0.0

    csum = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(csum > 0, diff[:, 1:] * taus[1:] / csum, 1.0)

    energy_ok = e_head[:, 0] > 1e-10 * W
    f0 = np.zeros(n)
    conf = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    band = cmnd[:, tau_min : tau_max + 1]
    below = band < threshold
    for i in np.flatnonzero(below.any(axis=1) & energy_ok):
        tau = tau_min + int(np.argmax(below[i]))
        while tau + 1 <= tau_max and cmnd[i, tau + 1] < cmnd[i, tau]:
            tau += 1
        t_ref = float(tau)
        if 1 <= tau < tau_max:
            a, b, c = cmnd[i, tau - 1], cmnd[i, tau], cmnd[i, tau + 1]
            den = a - 2 * b + c
            if den > 0:
                t_ref = tau + 0.5 * (a - c) / den
        hz = sr / t_ref
        if fmin <= hz <= fmax:
            f0[i] = hz
            voiced[i] = True
            conf[i] = float(np.clip(1.0 - cmnd[i, tau], 0.0, 1.0))
    return PitchTrack(f0, voiced, conf, times)


# ------------------------------------------------------------------- activity


@dataclass(frozen=True)
class ActivityConfig:
    frame: int = 400
    hop: int = 160
    band: tuple = (250.0, 4000.0)
    threshold_db: float = 6.0
    floor_percentile: float = 10.0
    floor_ceiling_db: float = -20.0
    dynamic_range_db: float = 60.0
    merge_gap: float = 0.05
    min_segment: float = 0.10


def band_energy_db(x: np.ndarray, sr: int, cfg: ActivityConfig) -> np.ndarray:
    """Per-frame band-limited mean-square level in dB re full scale."""
    frames = frame_signal(np.asarray(x, dtype=np.float64), cfg.frame, cfg.hop)
    if len(frames) == 0:
        return np.zeros(0)
    w = hann(cfg.frame)
    spec = np.fft.rfft(frames * w, axis=1)
    freqs = np.fft.rfftfreq(cfg.frame, 1.0 / sr)
    sel = (freqs >= cfg.band[0]) & (freqs <= cfg.band[1])
    # Parseval: two-sided energy / (N * sum w^2) gives the windowed mean square
    ms = 2.0 * (np.abs(spec[:, sel]) ** 2).sum(axis=1) / (cfg.frame * (w**2).sum())
    return 10.0 * np.log10(ms + 1e-24)


def detect_activity(clip: AudioClip, frame: Optional[int] = None, hop: Optional[int] = None,
                    cfg: ActivityConfig = ActivityConfig()) -> list:
    """Energy-based activity segments.

    A frame is active when its band level exceeds the noise floor by
    ``threshold_db``. The floor is a low percentile of frame levels, clamped
    to at most ``floor_ceiling_db`` and at least ``dynamic_range_db`` below
    the loudest frame. Gaps shorter than ``merge_gap`` are bridged and
    segments shorter than ``min_segment`` dropped.
    """
    if frame is not None or hop is not None:
        cfg = ActivityConfig(**{**cfg.__dict__, "frame": frame or cfg.frame, "hop": hop or cfg.hop})
    x = clip.samples
    n = len(x)
    if n == 0:
        raise ValueError("detect_activity needs a non-empty clip")
    sr = clip.sample_rate
    db = band_energy_db(x, sr, cfg)
    if len(db) == 0:
        return []
    floor = np.percentile(db, cfg.floor_percentile)
    floor = min(floor, cfg.floor_ceiling_db)
    floor = max(floor, db.max() - cfg.dynamic_range_db)
    active = db > floor + cfg.threshold_db

    half = (cfg.frame - cfg.hop) // 2
    segs = []
    idx = np.flatnonzero(np.diff(np.concatenate([[0], active.astype(np.int8), [0]])))
    for a, b in zip(idx[::2], idx[1::2]):
        start = 0 if a == 0 else a * cfg.hop + half
        end = n if b == len(active) else (b - 1) * cfg.hop + half + cfg.hop
        segs.append([start, min(end, n)])

    merged: list = []
    gap = int(round(cfg.merge_gap * sr))
    for s in segs:
        if merged and s[0] - merged[-1][1] < gap:
            merged[-1][1] = s[1]
        else:
            merged.append(s)
    min_len = int(round(cfg.min_segment * sr))
    return [Segment(int(s), int(e), "activity") for s, e in merged if e - s >= min_len]


def extract_noise(clip: AudioClip, min_duration: float = 0.2, cfg: ActivityConfig = ActivityConfig()) -> list:
    """Noise-only stretches (complement of activity), each at least ``min_duration`` long."""
    n = len(clip.samples)
    if n == 0:
        return []
    active = detect_activity(clip, cfg=cfg)
    min_len = int(round(min_duration * clip.sample_rate))
    out = []
    cursor = 0
    for seg in active + [Segment(n, n)]:
        if seg.start - cursor >= min_len:
            out.append(
                AudioClip(
                    clip.samples[cursor : seg.start].copy(),
                    clip.sample_rate,
                    f"{clip.id}:noise{len(out)}",
                    {"kind": "noise", "start": cursor, "end": seg.start, "source": clip.id},
                )
            )
        cursor = max(cursor, seg.end)
    return out


# ------------------------------------------------------------------------ wav


def write_wav(path, clip: AudioClip) -> None:
    """16-bit signed little-endian mono PCM."""
    pcm = np.clip(np.round(clip.samples.astype(np.float64) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(clip.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path, clip_id: Optional[str] = None) -> AudioClip:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        sr = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float32) / np.float32(32767.0)
    return AudioClip(pcm, sr, clip_id if clip_id is not None else str(path))

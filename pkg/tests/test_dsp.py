import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cryda import dsp
from cryda.dsp import AudioClip, FeatureConfig
from cryda.synthcorpus import PROFILES, CryParams, apply_domain, synth_cry

SR = 16000


def tone(freq, dur=1.0, amp=0.5, sr=SR):
    t = np.arange(int(dur * sr)) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


# -------------------------------------------------------------------- stft


def test_stft_dc_energy_in_bin_zero():
    spec = dsp.stft(AudioClip(np.full(4000, 0.3)))
    mag = np.abs(spec)
    assert np.all(mag.argmax(axis=1) == 0)


def test_stft_1khz_peaks_at_bin_32():
    spec = dsp.stft(tone(1000.0), n_fft=512)
    assert spec.shape[1] == 257
    assert np.all(np.abs(spec).argmax(axis=1) == 32)


def test_stft_short_clip():
    with pytest.raises(dsp.EmptyOutputError):
        dsp.stft(AudioClip(np.zeros(100)), win_length=400)


@pytest.mark.parametrize("n,win,hop", [(400, 400, 160), (16000, 400, 160), (48000, 400, 320), (1234, 256, 100)])
def test_stft_frame_count(n, win, hop):
    spec = dsp.stft(AudioClip(np.zeros(n)), n_fft=512, win_length=win, hop=hop)
    assert spec.shape[0] == (n - win) // hop + 1


def test_stft_matches_direct_dft(rng):
    x = rng.normal(size=1000) * 0.1
    spec = dsp.stft(AudioClip(x), n_fft=512, win_length=400, hop=200)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(400) / 400)
    k = np.arange(257)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(400)[None, :] / 512)
    for t in range(spec.shape[0]):
        frame = x[t * 200 : t * 200 + 400].astype(np.float32).astype(np.float64) * w
        np.testing.assert_allclose(spec[t], basis @ frame, atol=1e-9)


def test_stft_parseval_per_frame(rng):
    x = rng.normal(size=3000) * 0.2
    n_fft, win, hop = 512, 400, 160
    spec = dsp.stft(AudioClip(x), n_fft=n_fft, win_length=win, hop=hop)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    power = np.abs(spec) ** 2
    # one-sided spectrum: every bin except DC and Nyquist appears twice in the full DFT
    full = power[:, 0] + power[:, -1] + 2 * power[:, 1:-1].sum(axis=1)
    for t in range(spec.shape[0]):
        frame = x[t * hop : t * hop + win].astype(np.float32).astype(np.float64) * w
        assert full[t] / n_fft == pytest.approx(np.sum(frame**2), rel=1e-3)


# -------------------------------------------------------------- mel bank


def test_mel_filterbank_shape():
    assert dsp.mel_filterbank(512, 64).shape == (64, 257)


@pytest.mark.parametrize("fmin,fmax", [(-1.0, 8000.0), (100.0, 9000.0), (500.0, 400.0)])
def test_mel_filterbank_bad_edges(fmin, fmax):
    with pytest.raises(ValueError):
        dsp.mel_filterbank(512, 32, 16000, fmin, fmax)


def test_mel_filterbank_coverage_and_peak_spacing():
    fmin, fmax = 50.0, 8000.0
    fb = dsp.mel_filterbank(512, 64, SR, fmin, fmax)
    freqs = np.arange(257) * SR / 512
    inside = (freqs > fmin) & (freqs < fmax)
    assert np.all(fb[:, inside].max(axis=0) > 0)
    assert np.all(fb >= 0)
    mel = lambda f: 2595.0 * np.log10(1 + f / 700.0)
    imel = lambda m: 700.0 * (10 ** (m / 2595.0) - 1)
    centres = imel(np.linspace(mel(fmin), mel(fmax), 66)[1:-1])
    # each filter peaks at the FFT bin nearest its mel-spaced centre
    peaks = fb.argmax(axis=1)
    assert np.all(np.diff(peaks) >= 0)
    assert np.all(np.abs(freqs[peaks] - centres) <= SR / 512)


def test_mel_filterbank_matches_loop_oracle():
    n_fft, n_mels, sr, fmin, fmax = 512, 20, 16000, 50.0, 8000.0
    fb = dsp.mel_filterbank(n_fft, n_mels, sr, fmin, fmax)
    mel = lambda f: 2595.0 * np.log10(1 + f / 700.0)
    imel = lambda m: 700.0 * (10 ** (m / 2595.0) - 1)
    lo, hi = mel(fmin), mel(fmax)
    pts = [imel(lo + i * (hi - lo) / (n_mels + 1)) for i in range(n_mels + 2)]
    for m in range(n_mels):
        a, c, b = pts[m], pts[m + 1], pts[m + 2]
        for j in range(n_fft // 2 + 1):
            f = j * sr / n_fft
            if a <= f <= c:
                want = (f - a) / (c - a)
            elif c < f <= b:
                want = (b - f) / (b - c)
            else:
                want = 0.0
            assert fb[m, j] == pytest.approx(want, abs=1e-6)


# ---------------------------------------------------------------- log-mel


def test_log_mel_silence_is_floor():
    feats = dsp.log_mel(AudioClip(np.zeros(SR)), FeatureConfig())
    np.testing.assert_allclose(feats.frames, np.log(1e-10), rtol=1e-6)


@pytest.mark.parametrize("hop,n_mels", [(160, 64), (320, 32)])
def test_log_mel_shape_and_frame_rate(hop, n_mels):
    cfg = FeatureConfig(hop=hop, n_mels=n_mels)
    feats = dsp.log_mel(tone(700.0, dur=3.0), cfg)
    assert feats.frames.shape == ((3 * SR - 400) // hop + 1, n_mels)
    assert feats.frame_rate == SR / hop
    assert np.all(np.isfinite(feats.frames))


def test_log_mel_independent_oracle(rng):
    cfg = FeatureConfig(hop=320, n_mels=16)
    x = (rng.normal(size=4000) * 0.2).astype(np.float32)
    got = dsp.log_mel(AudioClip(x), cfg).frames
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(400) / 400)
    fb = dsp.mel_filterbank(512, 16, SR, cfg.fmin, cfg.fmax).astype(np.float64)
    for t in range(got.shape[0]):
        frame = x[t * 320 : t * 320 + 400].astype(np.float64) * w
        power = np.abs(np.fft.fft(frame, 512)[:257]) ** 2
        np.testing.assert_allclose(got[t], np.log(fb @ power + 1e-10), rtol=2e-4, atol=2e-4)


def test_log_mel_amplitude_doubling():
    a = dsp.log_mel(tone(800.0, amp=0.2)).frames
    b = dsp.log_mel(tone(800.0, amp=0.4)).frames
    strong = a > np.log(1e-10) + 10  # far above the floor, where the law holds
    assert strong.mean() > 0.3
    np.testing.assert_allclose((b - a)[strong], np.log(4.0), atol=1e-3)


def test_log_mel_golden_seed0_clip():
    clip = synth_cry(CryParams(), seed=0)
    golden = np.load(os.path.join(os.path.dirname(__file__), "data", "logmel_seed0.npy"))
    np.testing.assert_allclose(dsp.log_mel(clip, FeatureConfig()).frames, golden, rtol=1e-5, atol=1e-5)


def test_log_mel_ignores_metadata():
    x = tone(500.0).samples
    a = dsp.log_mel(AudioClip(x, SR, "a", {"label": "healthy"})).frames
    b = dsp.log_mel(AudioClip(x, SR, "zzz", {"label": "injury", "domain": "x"})).frames
    assert a.tobytes() == b.tobytes()


def test_log_mel_batch_matches_single(rng):
    cfg = FeatureConfig()
    x = rng.normal(size=(3, 8000)).astype(np.float32) * 0.1
    batch = dsp.log_mel_batch(x, cfg)
    for i in range(3):
        np.testing.assert_allclose(batch[i], dsp.log_mel(AudioClip(x[i]), cfg).frames, rtol=1e-5, atol=1e-5)


# ------------------------------------------------------------------ pitch


@pytest.mark.parametrize("freq", [300.0, 440.0, 620.0, 900.0])
def test_pitch_pure_tone(freq):
    track = dsp.estimate_pitch(tone(freq))
    assert track.voiced.mean() > 0.9
    assert np.median(track.voiced_f0()) == pytest.approx(freq, rel=0.01)


def test_pitch_white_noise_unvoiced():
    x = np.random.default_rng(3).normal(size=SR) * 0.3
    track = dsp.estimate_pitch(AudioClip(np.clip(x, -1, 1)))
    assert (~track.voiced).mean() >= 0.9


def test_pitch_synthetic_cry_mean():
    clip = synth_cry(CryParams(f0_mean=450.0, f0_contour="arc", jitter=0.01), seed=5)
    track = dsp.estimate_pitch(clip)
    truth = clip.metadata["f0_track"]
    assert track.voiced_f0().mean() == pytest.approx(truth[truth > 0].mean(), rel=0.03)


def test_pitch_voiced_within_band(rng):
    clip = synth_cry(CryParams(f0_mean=700.0, f0_contour="flat", jitter=0.05), seed=2)
    track = dsp.estimate_pitch(clip, fmin=250, fmax=1000)
    f = track.voiced_f0()
    assert len(f) > 0 and f.min() >= 250 and f.max() <= 1000
    assert np.all((track.confidence >= 0) & (track.confidence <= 1))


def test_pitch_frame_too_short():
    with pytest.raises(ValueError):
        dsp.estimate_pitch(tone(440.0), fmin=250.0, frame=100)


@given(st.integers(1, 20), st.sampled_from([320.0, 400.0, 500.0, 800.0]))
@settings(max_examples=20, deadline=None)
def test_pitch_shift_invariance(periods, freq):
    # integer-sample periods keep the delayed signal an exact time shift
    base = tone(freq, dur=0.6)
    shift = periods * int(round(SR / freq))
    delayed = AudioClip(np.concatenate([base.samples[shift:], base.samples[:shift]]), SR)
    a = np.median(dsp.estimate_pitch(base).voiced_f0())
    b = np.median(dsp.estimate_pitch(delayed).voiced_f0())
    assert abs(a - b) / a < 0.005


# --------------------------------------------------------------- activity


def test_activity_silence_empty():
    assert dsp.detect_activity(AudioClip(np.zeros(SR))) == []


def test_activity_tone_between_silences():
    x = np.concatenate([np.zeros(SR), tone(600.0).samples, np.zeros(SR)])
    segs = dsp.detect_activity(AudioClip(x))
    assert len(segs) == 1
    cfg = dsp.ActivityConfig()
    assert abs(segs[0].start - SR) <= cfg.frame
    assert abs(segs[0].end - 2 * SR) <= cfg.frame


def test_activity_two_expirations():
    clip = synth_cry(CryParams(n_expirations=2, gap_dur=0.5, jitter=0.0), seed=0)
    assert len(dsp.detect_activity(clip)) == 2


@given(st.integers(0, 10_000), st.floats(0.0, 0.8), st.integers(800, 20_000))
@settings(max_examples=40, deadline=None)
def test_segment_list_invariants(seed, burst_amp, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n) * 1e-3
    a, b = sorted(rng.integers(0, n, size=2))
    x[a:b] += burst_amp * np.sin(np.arange(b - a) * 0.3)
    clip = AudioClip(np.clip(x, -1, 1))
    segs = dsp.detect_activity(clip)
    for s in segs:
        assert 0 <= s.start < s.end <= n
    for s1, s2 in zip(segs, segs[1:]):
        assert s1.end <= s2.start
    for noise in dsp.extract_noise(clip):
        start, end = noise.metadata["start"], noise.metadata["end"]
        assert all(end <= s.start or start >= s.end for s in segs)


# ------------------------------------------------------------------ noise


def test_extract_noise_all_activity():
    assert dsp.extract_noise(tone(600.0, dur=2.0)) == []


def test_extract_noise_all_noise():
    x = np.random.default_rng(0).normal(size=SR) * 0.01
    clip = AudioClip(x)
    out = dsp.extract_noise(clip)
    assert len(out) == 1
    np.testing.assert_array_equal(out[0].samples, clip.samples)


def test_silence_partition():
    clip = AudioClip(np.zeros(12345))
    act = dsp.detect_activity(clip)
    noise = dsp.extract_noise(clip)
    covered = np.zeros(len(clip), dtype=int)
    for s in act:
        covered[s.start : s.end] += 1
    for c in noise:
        covered[c.metadata["start"] : c.metadata["end"]] += 1
    assert np.all(covered == 1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_extract_noise_iou_with_generator_spans(seed):
    params = CryParams(f0_mean=500.0, n_expirations=2, gap_dur=0.8, lead=0.6)
    clip = apply_domain(synth_cry(params, seed), PROFILES["hospital_b"], 15.0, seed)
    truth = ~clip.metadata["voicing_mask"]
    found = np.zeros(len(clip), dtype=bool)
    for c in dsp.extract_noise(clip):
        found[c.metadata["start"] : c.metadata["end"]] = True
    iou = (truth & found).sum() / (truth | found).sum()
    assert iou >= 0.8


# -------------------------------------------------------------------- wav


def test_wav_roundtrip(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, size=4000)
    path = tmp_path / "a.wav"
    dsp.write_wav(path, AudioClip(x, SR))
    back = dsp.read_wav(path)
    assert back.sample_rate == SR
    assert np.abs(back.samples - x).max() <= 1.0 / 32767
    raw = open(path, "rb").read()
    assert raw[:4] == b"RIFF" and os.path.getsize(path) == 44 + 2 * 4000

"""Acoustic re-programming: randomized perturbation of rhythm, pitch,
formants, frequency shape and energy that strips speaker style while
keeping linguistic content.

Every op is a pure function of (input, config, rng): same seed, same
bits out. Ops that draw random parameters accept an optional `trace`
dict and record every sampled value into it so sidecar files and
rng-replay tests can reconstruct the draws.

Only random_resample changes duration. All other stages preserve the
sample count exactly.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

SAMPLE_RATE = 16000
FRAME = 160          # 10 ms at 16 kHz
F0_WINDOW = 400      # 25 ms
F0_MIN, F0_MAX = 60.0, 400.0
VOICING_THRESHOLD = 0.3


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class ReprogramConfig:
    """Sampling ranges for the perturbation chain; all stages toggleable."""

    segment_frames: tuple = (19, 32)
    resample_factor: tuple = (0.5, 1.5)
    formant_ratio: tuple = (1.0, 1.4)
    pitch_shift_ratio: tuple = (1.0, 2.0)
    pitch_range_ratio: tuple = (1.0, 1.5)
    eq_gain_db: tuple = (-12.0, 12.0)
    eq_q: tuple = (0.5, 3.0)
    eq_band_hz: tuple = (60.0, 10000.0)
    eq_n_peaking: int = 8
    energy_gain: tuple = (0.5, 2.0)
    enable_pitch: bool = True
    enable_formant: bool = True
    enable_eq: bool = True
    enable_energy: bool = True
    enable_resample: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("segment_frames", "resample_factor", "formant_ratio",
                     "pitch_shift_ratio", "pitch_range_ratio", "eq_gain_db",
                     "eq_q", "eq_band_hz", "energy_gain"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        if self.segment_frames[0] < 1:
            raise ValueError("segment_frames must be >= 1")


@dataclass
class PitchContour:
    """F0 per 10 ms hop; 0 where unvoiced."""

    f0: np.ndarray
    voiced: np.ndarray
    hop: int = FRAME

    def median_voiced(self):
        return float(np.median(self.f0[self.voiced])) if self.voiced.any() else 0.0


def saturate(wav):
    """Clip to [-1, 1]; returns (clipped, clip count)."""
    n = int(np.sum(np.abs(wav) > 1.0))
    return np.clip(wav, -1.0, 1.0).astype(np.float32), n


# ---------------------------------------------------------------------------
# WAV files (16-bit PCM mono)


def load_wav(path):
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise AudioError(f"{path}: want 16-bit mono PCM")
        sr = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    wav = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return wav, sr


def save_wav(path, wav, sr=SAMPLE_RATE):
    clipped, _ = saturate(np.asarray(wav, dtype=np.float32))
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sr)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Segmentation shared by rhythm and energy

def draw_segments(n_frames, cfg, rng):
    """Consecutive segment lengths in frames.

    Lengths are drawn uniformly from segment_frames; a shorter final
    remainder is marked not-full. All lengths are drawn before any other
    randomness so replay oracles can mirror the stream.
    """
    lo, hi = cfg.segment_frames
    segments = []
    remaining = n_frames
    while remaining > 0:
        want = int(rng.integers(lo, hi + 1))
        take = min(want, remaining)
        segments.append((take, take == want))
        remaining -= take
    return segments


def _interp_resample(series, new_len):
    """Linear interpolation along axis 0 to new_len ticks; exact when
    new_len equals the input length."""
    n = len(series)
    if new_len == n:
        return series.copy()
    if new_len <= 1 or n == 1:
        return np.repeat(series[:1], max(new_len, 1), axis=0)
    pos = np.linspace(0.0, n - 1.0, new_len)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo).astype(series.dtype if series.ndim > 1 else np.float64)
    if series.ndim == 1:
        out = series[lo] * (1.0 - w) + series[hi] * w
    else:
        out = series[lo] * (1.0 - w)[:, None] + series[hi] * w[:, None]
    return out.astype(series.dtype)


def random_resample(series, cfg, rng, trace=None):
    """Rhythm perturbation: per-segment linear time stretch.

    1-D input is a waveform (frame = 160 samples); 2-D input is a
    feature sequence (frame = one vector). Segment lengths are uniform
    in segment_frames, each full segment is stretched to
    round(len * f), f ~ U(resample_factor); the final remainder passes
    through untouched.
    """
    series = np.asarray(series)
    if series.size == 0 or len(series) == 0:
        raise AudioError("random_resample: empty input")
    frame = FRAME if series.ndim == 1 else 1
    n_frames = max(1, math.ceil(len(series) / frame))

    segments = draw_segments(n_frames, cfg, rng)
    flo, fhi = cfg.resample_factor
    factors = [float(rng.uniform(flo, fhi)) for _, full in segments if full]

    out_parts = []
    tick = 0
    fi = 0
    seg_log = []
    for length, full in segments:
        ticks = min(length * frame, len(series) - tick)
        chunk = series[tick:tick + ticks]
        tick += ticks
        if full:
            f = factors[fi]
            fi += 1
            new_ticks = int(round(ticks * f))
            out_parts.append(_interp_resample(chunk, new_ticks))
            seg_log.append({"frames": length, "factor": f})
        else:
            out_parts.append(chunk.copy())
            seg_log.append({"frames": length, "factor": None})
    if trace is not None:
        trace["segments"] = seg_log
    return np.concatenate(out_parts, axis=0)


# ---------------------------------------------------------------------------
# Pitch


def estimate_f0(wav, sr=SAMPLE_RATE):
    """Normalized-autocorrelation F0: 25 ms window, 10 ms hop, 60-400 Hz."""
    wav = np.asarray(wav, dtype=np.float64)
    if len(wav) < F0_WINDOW:
        raise AudioError(f"estimate_f0: need at least {F0_WINDOW} samples, got {len(wav)}")
    lag_min = int(sr / F0_MAX)
    lag_max = int(math.ceil(sr / F0_MIN))
    n_out = math.ceil(len(wav) / FRAME)
    n_frames = 1 + (len(wav) - F0_WINDOW) // FRAME

    idx = np.arange(F0_WINDOW)[None, :] + FRAME * np.arange(n_frames)[:, None]
    frames = wav[idx]
    frames = frames - frames.mean(axis=1, keepdims=True)

    nfft = 1 << int(math.ceil(math.log2(F0_WINDOW + lag_max + 1)))
    spec = np.fft.rfft(frames, nfft, axis=1)
    ac = np.fft.irfft(spec * np.conj(spec), axis=1)[:, :lag_max + 1]
    r0 = ac[:, 0].copy()
    quiet = r0 < 1e-9
    r0[quiet] = 1.0
    norm = ac / r0[:, None]

    window = norm[:, lag_min:lag_max + 1]
    best = np.argmax(window, axis=1) + lag_min
    peak = norm[np.arange(n_frames), best]

    # parabolic refinement around the integer peak
    lag = best.astype(np.float64)
    inner = (best > lag_min) & (best < lag_max)
    if inner.any():
        i = np.where(inner)[0]
        a = norm[i, best[i] - 1]
        b = norm[i, best[i]]
        c = norm[i, best[i] + 1]
        denom = a - 2 * b + c
        shift = np.where(np.abs(denom) > 1e-12, 0.5 * (a - c) / denom, 0.0)
        lag[i] = best[i] + np.clip(shift, -0.5, 0.5)

    f0 = np.zeros(n_out)
    voiced = np.zeros(n_out, dtype=bool)
    v = (peak >= VOICING_THRESHOLD) & ~quiet
    f0_vals = sr / lag
    v &= (f0_vals >= F0_MIN) & (f0_vals <= F0_MAX)
    f0[:n_frames][v] = f0_vals[v]
    voiced[:n_frames] = v
    return PitchContour(f0.astype(np.float32), voiced)


def pitch_shift(wav, shift_ratio, range_ratio, sr=SAMPLE_RATE):
    """Deterministic core: move the median F0 by shift_ratio and scale
    contour deviations about the median by range_ratio. Duration is
    preserved exactly. Unvoiced audio passes through unchanged.

    Realized as a time-varying phase-vocoder frequency warp; a
    resample-then-stretch chain leaves grain seams that decohere the
    later STFT stages.
    """
    wav = np.asarray(wav, dtype=np.float64)
    if shift_ratio == 1.0 and range_ratio == 1.0:
        return wav.astype(np.float32)
    contour = estimate_f0(wav, sr)
    if not contour.voiced.any():
        return wav.astype(np.float32)
    med = contour.median_voiced()
    n_frames = len(contour.f0)

    ratio = np.full(n_frames, np.nan)
    v = contour.voiced
    target = shift_ratio * med + (contour.f0[v] - med) * range_ratio
    ratio[v] = target / contour.f0[v]
    idx = np.arange(n_frames)
    if (~v).any():
        ratio[~v] = np.interp(idx[~v], idx[v], ratio[v])
    ratio = np.clip(ratio, 0.25, 4.0)
    return _pv_frequency_warp(wav, lambda centers: np.interp(
        centers / FRAME, idx, ratio))


def _ratio_with_coin(lo, hi, rng):
    r = float(rng.uniform(lo, hi))
    if rng.random() < 0.5:
        r = 1.0 / r
    return r


def pitch_randomize(wav, cfg, rng, trace=None):
    """Sample shift and range ratios (each flipped to its reciprocal with
    probability 0.5) and apply the deterministic pitch core."""
    ps = _ratio_with_coin(*cfg.pitch_shift_ratio, rng)
    prr = _ratio_with_coin(*cfg.pitch_range_ratio, rng)
    if trace is not None:
        trace["shift_ratio"] = ps
        trace["range_ratio"] = prr
    return pitch_shift(wav, ps, prr)


# ---------------------------------------------------------------------------
# Formant shift

_STFT_WIN = 1024
_STFT_HOP = 256


def _stft(wav):
    n = len(wav)
    pad = _STFT_WIN
    x = np.pad(np.asarray(wav, dtype=np.float64), (pad, pad))
    n_frames = 1 + (len(x) - _STFT_WIN) // _STFT_HOP
    idx = np.arange(_STFT_WIN)[None, :] + _STFT_HOP * np.arange(n_frames)[:, None]
    win = np.hanning(_STFT_WIN)
    return np.fft.rfft(x[idx] * win, axis=1), n


def _istft(frames, out_len):
    win = np.hanning(_STFT_WIN)
    x = np.fft.irfft(frames, n=_STFT_WIN, axis=1) * win
    pad = _STFT_WIN
    total = pad * 2 + out_len
    n_frames = len(frames)
    out = np.zeros(total + _STFT_WIN)
    acc = np.zeros(total + _STFT_WIN)
    for k in range(n_frames):
        s = k * _STFT_HOP
        out[s:s + _STFT_WIN] += x[k]
        acc[s:s + _STFT_WIN] += win * win
    acc[acc < 1e-9] = 1.0
    out = out / acc
    return out[pad:pad + out_len]


def _pv_frequency_warp(wav, ratio_source):
    """Scale the spectrum of each STFT frame along the frequency axis.

    ratio_source is a scalar or a callable mapping frame centers (in
    samples of the original signal) to per-frame ratios. Bins are moved
    by linear interpolation; each source bin's measured instantaneous
    frequency is scaled by the same ratio and the synthesis phase is
    integrated, which keeps overlapping frames coherent.
    """
    wav = np.asarray(wav, dtype=np.float64)
    if len(wav) < _STFT_WIN // 2:
        return saturate(wav)[0]
    frames, n = _stft(wav)
    nframes, nbins = frames.shape
    if callable(ratio_source):
        centers = _STFT_HOP * np.arange(nframes) - _STFT_WIN / 2.0
        ratios = np.asarray(ratio_source(np.clip(centers, 0, len(wav) - 1)))
    else:
        ratios = np.full(nframes, float(ratio_source))

    k = np.arange(nbins)
    src = k[None, :] / ratios[:, None]
    lo = np.floor(src).astype(np.int64)
    w = src - lo
    hi = lo + 1
    valid_lo = lo < nbins
    valid_hi = hi < nbins
    lo = np.minimum(lo, nbins - 1)
    hi = np.minimum(hi, nbins - 1)

    def warp_rows(arr, rows):
        return (np.take_along_axis(arr, lo[rows], axis=1) * (1.0 - w[rows]) * valid_lo[rows]
                + np.take_along_axis(arr, hi[rows], axis=1) * w[rows] * valid_hi[rows])

    mag = np.abs(frames)
    phase = np.angle(frames)
    omega = 2.0 * np.pi * k / _STFT_WIN                    # rad per sample
    mag_w = warp_rows(mag, slice(None))
    psi = np.empty_like(mag_w)
    psi[0] = np.angle(warp_rows(frames[:1].real, slice(0, 1))
                      + 1j * warp_rows(frames[:1].imag, slice(0, 1)))[0]
    if nframes > 1:
        dphi = np.diff(phase, axis=0) - omega * _STFT_HOP
        dphi = (dphi + np.pi) % (2.0 * np.pi) - np.pi
        inst = omega + dphi / _STFT_HOP                     # (T-1, K)
        inst_w = ratios[1:, None] * warp_rows(inst, slice(1, None))
        psi[1:] = psi[0] + _STFT_HOP * np.cumsum(inst_w, axis=0)
    out = _istft(mag_w * np.exp(1j * psi), n)
    out, _ = saturate(out)
    return out


def formant_warp(wav, ratio):
    """Deterministic core: stretch the spectrum along the frequency axis
    by `ratio`; length preserved exactly."""
    return _pv_frequency_warp(wav, float(ratio))


def formant_shift(wav, cfg, rng, trace=None):
    """Sample the warp ratio (reciprocal coin) and apply the core."""
    ratio = _ratio_with_coin(*cfg.formant_ratio, rng)
    if trace is not None:
        trace["ratio"] = ratio
    return formant_warp(wav, ratio)


# ---------------------------------------------------------------------------
# Parametric EQ (audio-EQ-cookbook biquads)


def _shelf_coeffs(kind, gain_db, freq, q, sr):
    A = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * math.pi * freq / sr
    cs, sn = math.cos(w0), math.sin(w0)
    alpha = sn / (2.0 * q)
    two_rt = 2.0 * math.sqrt(A) * alpha
    if kind == "low":
        b0 = A * ((A + 1) - (A - 1) * cs + two_rt)
        b1 = 2 * A * ((A - 1) - (A + 1) * cs)
        b2 = A * ((A + 1) - (A - 1) * cs - two_rt)
        a0 = (A + 1) + (A - 1) * cs + two_rt
        a1 = -2 * ((A - 1) + (A + 1) * cs)
        a2 = (A + 1) + (A - 1) * cs - two_rt
    else:
        b0 = A * ((A + 1) + (A - 1) * cs + two_rt)
        b1 = -2 * A * ((A - 1) + (A + 1) * cs)
        b2 = A * ((A + 1) + (A - 1) * cs - two_rt)
        a0 = (A + 1) - (A - 1) * cs + two_rt
        a1 = 2 * ((A - 1) - (A + 1) * cs)
        a2 = (A + 1) - (A - 1) * cs - two_rt
    return np.array([b0, b1, b2]) / a0, np.array([1.0, a1 / a0, a2 / a0])


def _peaking_coeffs(gain_db, freq, q, sr):
    A = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * math.pi * freq / sr
    cs, sn = math.cos(w0), math.sin(w0)
    alpha = sn / (2.0 * q)
    b = np.array([1 + alpha * A, -2 * cs, 1 - alpha * A])
    a0 = 1 + alpha / A
    a = np.array([a0, -2 * cs, 1 - alpha / A])
    return b / a0, a / a0


def biquad_chain(wav, filters, sr=SAMPLE_RATE):
    """Apply a serial chain of (kind, freq, gain_db, q) biquads.

    Center/corner frequencies are clamped to 0.45 * sr: cookbook biquads
    are undefined at or above Nyquist (the nominal 10 kHz band ceiling
    exceeds it at 16 kHz).
    """
    out = np.asarray(wav, dtype=np.float64)
    ceiling = 0.45 * sr
    for kind, freq, gain_db, q in filters:
        freq = min(freq, ceiling)
        if kind == "peak":
            b, a = _peaking_coeffs(gain_db, freq, q, sr)
        else:
            b, a = _shelf_coeffs(kind, gain_db, freq, q, sr)
        out = lfilter(b, a, out)
    out, _ = saturate(out)
    return out


def _log_uniform(lo, hi, rng):
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def parametric_eq(wav, cfg, rng, trace=None):
    """Random frequency shaping: one low shelf at the band floor, one high
    shelf at the band ceiling, eight peaking filters with log-uniform
    centers; gains uniform in dB, Q log-uniform."""
    glo, ghi = cfg.eq_gain_db
    qlo, qhi = cfg.eq_q
    flo, fhi = cfg.eq_band_hz
    filters = [("low", flo, float(rng.uniform(glo, ghi)), _log_uniform(qlo, qhi, rng))]
    for _ in range(cfg.eq_n_peaking):
        freq = _log_uniform(flo, fhi, rng)
        filters.append(("peak", freq, float(rng.uniform(glo, ghi)),
                        _log_uniform(qlo, qhi, rng)))
    filters.append(("high", fhi, float(rng.uniform(glo, ghi)),
                    _log_uniform(qlo, qhi, rng)))
    if trace is not None:
        trace["filters"] = [
            {"kind": k, "freq": f, "gain_db": g, "q": q} for k, f, g, q in filters]
    return biquad_chain(wav, filters)


# ---------------------------------------------------------------------------
# Energy


def energy_reprogram(wav, cfg, rng, trace=None):
    """Per-segment gain, log-uniform in energy_gain, with 10 ms linear
    crossfades at segment boundaries; saturating clip at the end."""
    wav = np.asarray(wav, dtype=np.float64)
    n_frames = max(1, math.ceil(len(wav) / FRAME))
    segments = draw_segments(n_frames, cfg, rng)
    glo, ghi = cfg.energy_gain
    gains = [_log_uniform(glo, ghi, rng) if glo < ghi else float(glo)
             for _ in segments]

    env = np.empty(len(wav))
    pos = 0
    for (length, _), gain in zip(segments, gains):
        ticks = min(length * FRAME, len(wav) - pos)
        env[pos:pos + ticks] = gain
        pos += ticks
    # 10 ms crossfade: box-smooth the step envelope
    if len(env) > FRAME:
        padded = np.pad(env, (FRAME // 2, FRAME - FRAME // 2 - 1), mode="edge")
        kernel = np.ones(FRAME) / FRAME
        env = np.convolve(padded, kernel, mode="valid")
    out, clipped = saturate(wav * env)
    if trace is not None:
        trace["segments"] = [{"frames": s, "gain": g}
                             for (s, _), g in zip(segments, gains)]
        trace["clipped_samples"] = clipped
    return out


# ---------------------------------------------------------------------------
# Full chain


def reprogram(wav, cfg, rng=None, trace=None):
    """pitch -> formant -> EQ -> energy -> rhythm, each stage drawing from
    an independently spawned child of the master generator."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    children = rng.spawn(5)
    out = np.asarray(wav, dtype=np.float32)
    stages = (
        ("pitch", cfg.enable_pitch, pitch_randomize),
        ("formant", cfg.enable_formant, formant_shift),
        ("eq", cfg.enable_eq, parametric_eq),
        ("energy", cfg.enable_energy, energy_reprogram),
        ("resample", cfg.enable_resample, random_resample),
    )
    for (name, enabled, fn), child in zip(stages, children):
        if not enabled:
            continue
        sub = {} if trace is not None else None
        out = fn(out, cfg, child, trace=sub)
        if trace is not None:
            trace[name] = sub
    return out.astype(np.float32)

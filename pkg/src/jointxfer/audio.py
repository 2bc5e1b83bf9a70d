"""Speech front end: PCM16 WAV -> 64x64x3 log-Mel segments.

Pipeline: Hamming-windowed frames (25 ms window, 10 ms hop) -> power
spectrum -> 64 triangular Mel filters over 20-8000 Hz -> natural log ->
static / delta / delta-delta channels -> 64-frame windows with a 30-frame
overlap.
"""

import wave
from dataclasses import dataclass

import numpy as np

from .checkpoint import SEGMENT_MAGIC, atomic_write, decode_tensor_file, encode_tensor_file
from .errors import ConfigError, DataError, TooShortError

MIN_SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if self.sample_rate < MIN_SAMPLE_RATE:
            raise DataError(
                f"sample rate {self.sample_rate} Hz < {MIN_SAMPLE_RATE} Hz "
                "(Mel bank needs an 8 kHz Nyquist; no resampler)")


@dataclass
class MelSegment:
    data: np.ndarray  # [mel bins, frames, {static, delta, delta-delta}]
    utterance_id: str
    start_frame: int


def read_wav(path):
    """Decode a 16-bit PCM mono WAV into a :class:`Waveform` in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise DataError(f"{path}: expected mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: unreadable WAV ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(pcm, rate)


def write_wav(path, waveform):
    pcm = np.clip(np.round(waveform.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(waveform.sample_rate)
        wf.writeframes(pcm.tobytes())


def frame_signal(w, window_ms=25, hop_ms=10):
    """Split into Hamming-windowed frames ``[T, window_samples]``; the
    partial tail frame is dropped."""
    win = int(round(w.sample_rate * window_ms / 1000))
    hop = int(round(w.sample_rate * hop_ms / 1000))
    n = w.samples.size
    if n < win:
        raise TooShortError(f"signal of {n} samples shorter than one {win}-sample window")
    t = (n - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    return w.samples[idx] * np.hamming(win)[None, :]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def fft_size(window_samples):
    return 1 << int(np.ceil(np.log2(window_samples)))


def mel_band_edges(n_mels=64, fmin=20.0, fmax=8000.0):
    """``n_mels + 2`` band edges in Hz, evenly spaced on the Mel scale."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    # pin the outer edges; the Mel round trip is off by a few ulps
    edges[0], edges[-1] = fmin, fmax
    return edges


def mel_filterbank(sample_rate, n_fft, n_mels=64, fmin=20.0, fmax=8000.0):
    """Triangular filters ``[n_mels, n_fft//2 + 1]``, area-normalized.

    Triangles are evaluated at the exact FFT bin frequencies, so any bin at or
    outside ``[fmin, fmax]`` gets zero weight.
    """
    if fmax > sample_rate / 2:
        raise ConfigError(f"fmax {fmax} Hz exceeds Nyquist {sample_rate / 2} Hz")
    if not 0 <= fmin < fmax:
        raise ConfigError(f"need 0 <= fmin < fmax, got {fmin}, {fmax}")
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_band_edges(n_mels, fmin, fmax)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    tri = np.maximum(0.0, np.minimum(up, down))
    return tri * (2.0 / (hi - lo))


def log_mel(frames, sample_rate, n_mels=64, fmin=20.0, fmax=8000.0):
    """Log Mel-spectrogram ``[n_mels, T]`` from windowed frames ``[T, win]``."""
    n_fft = fft_size(frames.shape[1])
    fb = mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    return np.log(np.maximum(fb @ power.T, LOG_FLOOR))


def delta(feat, n=2):
    """Regression delta along the time axis (last axis), edge-replicated."""
    feat = np.asarray(feat, dtype=np.float64)
    t = feat.shape[-1]
    if t < 2 * n + 1:
        raise DataError(f"delta needs at least {2 * n + 1} frames, got {t}")
    pad = np.pad(feat, [(0, 0)] * (feat.ndim - 1) + [(n, n)], mode="edge")
    denom = 2.0 * sum(k * k for k in range(1, n + 1))
    out = np.zeros_like(feat)
    for k in range(1, n + 1):
        out += k * (pad[..., n + k:n + k + t] - pad[..., n - k:n - k + t])
    return out / denom


def stack_channels(logmel):
    """``[F, T]`` log-Mel -> ``[F, T, 3]`` with static, delta, delta-delta."""
    d1 = delta(logmel)
    return np.stack([logmel, d1, delta(d1)], axis=-1)


def segment(spec3, length=64, overlap=30, utterance_id=""):
    """Cut ``[F, T, 3]`` into ``length``-frame windows advancing by
    ``length - overlap`` frames; the tail is dropped."""
    t = spec3.shape[1]
    if t < length:
        raise TooShortError(f"utterance {utterance_id!r}: {t} frames < segment length {length}")
    hop = length - overlap
    count = (t - length) // hop + 1
    return [MelSegment(spec3[:, s:s + length, :].copy(), utterance_id, s)
            for s in range(0, hop * count, hop)]


def extract_segments(w, utterance_id="", n_mels=64, length=64, overlap=30):
    frames = frame_signal(w)
    spec = log_mel(frames, w.sample_rate, n_mels=n_mels)
    return segment(stack_channels(spec), length, overlap, utterance_id)


def segments_to_tensor(segments):
    """Stack segments into network layout ``[S, 3, F, T]``."""
    return np.stack([s.data.transpose(2, 0, 1) for s in segments])


def save_segment_cache(path, segments):
    header = {"utterance_id": segments[0].utterance_id if segments else ""}
    tensors = {
        "segments": np.stack([s.data for s in segments]) if segments else np.zeros((0, 64, 64, 3)),
        "start_frames": np.array([s.start_frame for s in segments], dtype=np.float64),
    }
    atomic_write(path, encode_tensor_file(header, tensors, magic=SEGMENT_MAGIC))


def load_segment_cache(path):
    with open(path, "rb") as fh:
        header, tensors = decode_tensor_file(fh.read(), magic=SEGMENT_MAGIC)
    uid = header.get("utterance_id", "")
    return [MelSegment(d, uid, int(s))
            for d, s in zip(tensors["segments"], tensors["start_frames"])]

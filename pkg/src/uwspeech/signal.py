"""Audio I/O, log-mel extraction and Griffin-Lim resynthesis.

Framing convention (normative for every module in this package): a waveform
of ``n`` samples is cut into frames of ``frame_len`` samples every ``hop_len``
samples, starting at sample 0, with the tail zero-padded so the last frame is
complete::

    num_frames = ceil((n - frame_len) / hop_len) + 1     (n >= frame_len)

Each frame is Hann-windowed, zero-padded to ``fft_size`` and transformed.
Mel energies are magnitudes (not power) summed through an HTK-style
triangular filterbank, then compressed with ``log(m + 1e-5)``.
"""

from __future__ import annotations

import dataclasses
import math
import struct
import wave
from pathlib import Path

import numpy as np
import scipy.signal

MAG_EPS = 1e-5
MEL_MAGIC = b"UWMEL\x00"
MEL_VERSION = 1


class AudioFormatError(ValueError):
    """Raised for WAV files this package cannot read."""


@dataclasses.dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be one-dimensional (mono)")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclasses.dataclass
class SignalConfig:
    sample_rate: int = 16000
    frame_ms: float = 50.0
    hop_ms: float = 12.5
    num_mels: int = 80
    fft_size: int = 1024
    mel_fmin: float = 0.0
    mel_fmax: float = 8000.0
    log_floor: float = math.log(MAG_EPS)
    griffin_lim_iters: int = 60

    @property
    def frame_len(self) -> int:
        return int(round(self.sample_rate * self.frame_ms / 1000.0))

    @property
    def hop_len(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    def validate(self):
        if self.fft_size < self.frame_len:
            raise ValueError(
                f"fft_size {self.fft_size} smaller than frame length {self.frame_len}")
        if not 0 <= self.mel_fmin < self.mel_fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= mel_fmin < mel_fmax <= sample_rate / 2")
        if self.hop_len <= 0 or self.num_mels <= 0:
            raise ValueError("hop length and num_mels must be positive")
        if self.griffin_lim_iters < 1:
            raise ValueError("griffin_lim_iters must be >= 1")
        return self

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.frame_len:
            raise ValueError(
                f"waveform of {num_samples} samples is shorter than one frame "
                f"({self.frame_len} samples)")
        return -(-(num_samples - self.frame_len) // self.hop_len) + 1


@dataclasses.dataclass
class MelSpectrogram:
    frames: np.ndarray  # (num_frames, num_mels)
    frame_ms: float = 50.0
    hop_ms: float = 12.5

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ValueError("mel frames must be a (num_frames, num_mels) matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("mel spectrogram contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_mels(self) -> int:
        return self.frames.shape[1]


# ---------------------------------------------------------------- WAV I/O


def load_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file, scaling samples to [-1, 1]."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            if f.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: compressed WAV ({f.getcomptype()}) not supported")
            if channels != 1:
                raise AudioFormatError(f"{path}: expected mono, got {channels} channels")
            if width != 2:
                raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
            raw = f.readframes(f.getnframes())
    except wave.Error as e:
        raise AudioFormatError(f"{path}: {e}") from e
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def save_wav(path, w: Waveform):
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


# ---------------------------------------------------------------- mel features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: SignalConfig) -> np.ndarray:
    """Center frequency (Hz) of each triangular mel filter."""
    points = np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax), cfg.num_mels + 2)
    return mel_to_hz(points[1:-1])


def mel_filterbank(cfg: SignalConfig) -> np.ndarray:
    """(num_mels, fft_size // 2 + 1) triangular filters with unit peak."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax),
                                  cfg.num_mels + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def analysis_window(cfg: SignalConfig) -> np.ndarray:
    return scipy.signal.get_window("hann", cfg.frame_len, fftbins=True)


def frame_signal(samples: np.ndarray, cfg: SignalConfig) -> np.ndarray:
    n_frames = cfg.num_frames(len(samples))
    total = (n_frames - 1) * cfg.hop_len + cfg.frame_len
    padded = np.zeros(total)
    padded[:len(samples)] = samples
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop_len * np.arange(n_frames)[:, None]
    return padded[idx]


def stft(samples: np.ndarray, cfg: SignalConfig) -> np.ndarray:
    """Complex STFT, shape (num_frames, fft_size // 2 + 1)."""
    frames = frame_signal(samples, cfg) * analysis_window(cfg)
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def istft(spec: np.ndarray, cfg: SignalConfig) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (weighted overlap-add)."""
    win = analysis_window(cfg)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :cfg.frame_len] * win
    n_frames = spec.shape[0]
    total = (n_frames - 1) * cfg.hop_len + cfg.frame_len
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        s = t * cfg.hop_len
        out[s:s + cfg.frame_len] += frames[t]
        norm[s:s + cfg.frame_len] += win ** 2
    safe = norm > 1e-10
    out[safe] /= norm[safe]
    out[~safe] = 0.0
    return out


def mel_spectrogram(w: Waveform, cfg: SignalConfig | None = None) -> MelSpectrogram:
    cfg = (cfg or SignalConfig()).validate()
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"expected {cfg.sample_rate} Hz audio, got {w.sample_rate} Hz")
    if len(w) == 0:
        raise ValueError("empty waveform")
    mag = np.abs(stft(w.samples, cfg))
    mel = mag @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(mel + MAG_EPS).astype(np.float32), cfg.frame_ms, cfg.hop_ms)


def mel_to_linear(mel: MelSpectrogram, cfg: SignalConfig) -> np.ndarray:
    """Linear magnitude estimate via the filterbank pseudo-inverse, clamped at 0."""
    energies = np.maximum(np.exp(mel.frames.astype(np.float64)) - MAG_EPS, 0.0)
    inv = np.linalg.pinv(mel_filterbank(cfg))
    return np.maximum(energies @ inv.T, 0.0)


def spectral_convergence(target_mag: np.ndarray, samples: np.ndarray, cfg: SignalConfig) -> float:
    """||target - |STFT(x)||| / ||target|| on the linear magnitude grid."""
    mag = np.abs(stft(samples, cfg))[:target_mag.shape[0]]
    denom = np.linalg.norm(target_mag)
    if denom == 0.0:
        return float(np.linalg.norm(mag))
    return float(np.linalg.norm(target_mag - mag) / denom)


def griffin_lim(mel: MelSpectrogram, cfg: SignalConfig | None = None, seed: int = 0,
                iters: int | None = None) -> Waveform:
    """Reconstruct a waveform whose magnitude STFT approximates ``mel``.

    The output has ``(num_frames - 1) * hop_len + frame_len`` samples.
    """
    cfg = (cfg or SignalConfig()).validate()
    iters = cfg.griffin_lim_iters if iters is None else iters
    if iters < 1:
        raise ValueError("griffin_lim needs at least one iteration")
    if mel.num_frames == 0:
        raise ValueError("cannot vocode an empty mel spectrogram")
    target = mel_to_linear(mel, cfg)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target.shape))
    x = istft(target * phase, cfg)
    for _ in range(iters - 1):
        est = stft(x, cfg)
        x = istft(target * np.exp(1j * np.angle(est)), cfg)
    return Waveform(x, cfg.sample_rate)


# ---------------------------------------------------------------- mel files
#
# Layout (little-endian): magic "UWMEL\0" | u32 version | u32 rows | u32 cols
# | f32 frame_ms | f32 hop_ms | rows*cols f32 payload, row-major.


def save_mel(path, mel: MelSpectrogram):
    rows, cols = mel.frames.shape
    header = MEL_MAGIC + struct.pack("<IIIff", MEL_VERSION, rows, cols, mel.frame_ms, mel.hop_ms)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(mel.frames, dtype="<f4").tobytes())


def load_mel(path) -> MelSpectrogram:
    data = Path(path).read_bytes()
    if not data.startswith(MEL_MAGIC):
        raise ValueError(f"{path}: not a mel feature file")
    off = len(MEL_MAGIC)
    version, rows, cols, frame_ms, hop_ms = struct.unpack_from("<IIIff", data, off)
    if version != MEL_VERSION:
        raise ValueError(f"{path}: unsupported mel file version {version}")
    off += struct.calcsize("<IIIff")
    payload = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off)
    return MelSpectrogram(payload.reshape(rows, cols).astype(np.float32), frame_ms, hop_ms)

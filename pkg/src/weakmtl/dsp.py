"""Log-mel energy frontend: framing, STFT, mel filterbank, feature file I/O.

Everything here is deterministic and side-effect free; identical input and
config give bit-identical output.
"""

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfig, InvalidInput, IoError, ParseError

FEATURE_MAGIC = b"LMEL"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class DspConfig:
    """Frontend parameters. Defaults: 40 ms frames, 20 ms hop, 64 mel bins."""

    frame_len_ms: float = 40.0
    hop_ms: float = 20.0
    n_mels: int = 64
    sample_rate: int = 16000
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidConfig("sample_rate must be positive")
        if self.hop_ms > self.frame_len_ms:
            raise InvalidConfig("hop_ms must not exceed frame_len_ms")
        if self.hop_ms <= 0:
            raise InvalidConfig("hop_ms must be positive")
        if self.log_floor <= 0:
            raise InvalidConfig("log_floor must be positive")
        if self.n_mels < 1:
            raise InvalidConfig("n_mels must be >= 1")
        if self.n_mels > self.fft_size // 2:
            raise InvalidConfig(
                f"n_mels={self.n_mels} too large for fft_size={self.fft_size}"
            )

    @property
    def frame_len(self) -> int:
        """Frame length in samples."""
        return int(round(self.frame_len_ms * self.sample_rate / 1000.0))

    @property
    def hop(self) -> int:
        """Hop size in samples."""
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def hop_seconds(self) -> float:
        return self.hop / self.sample_rate

    @property
    def fft_size(self) -> int:
        """Next power of two >= frame length in samples."""
        n = 1
        while n < self.frame_len:
            n *= 2
        return n


@dataclass(frozen=True)
class Waveform:
    """Mono PCM audio as float32 amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidInput("sample_rate must be positive")


@dataclass(frozen=True)
class FeatureMap:
    """Time-frequency representation, one row per frame, one column per mel bin."""

    data: np.ndarray  # (n_frames, n_bins) float32

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise InvalidInput(f"feature map must be 2-D non-empty, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInput("feature map contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]


def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    # Reflection without repeating the edge sample; degenerates to constant
    # extension for length-1 input (np.pad would reject pad >= len).
    n = len(x)
    if pad == 0:
        return x
    if n == 1:
        return np.full(n + 2 * pad, x[0], dtype=x.dtype)
    idx = np.arange(-pad, n + pad)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    idx = np.where(idx >= n, period - idx, idx)
    return x[idx]


def _frame_signal(samples: np.ndarray, cfg: DspConfig) -> np.ndarray:
    """Split into overlapping frames of cfg.frame_len every cfg.hop samples.

    The signal is reflection-padded by frame_len/2 on both sides so that
    T = ceil(len / hop) frames always fit.
    """
    n = len(samples)
    frame_len, hop = cfg.frame_len, cfg.hop
    n_frames = -(-n // hop)  # ceil
    padded = _reflect_pad(samples, frame_len // 2)
    starts = np.arange(n_frames) * hop
    idx = starts[:, None] + np.arange(frame_len)[None, :]
    return padded[idx]


def _hann(n: int) -> np.ndarray:
    # Periodic Hann window, the usual STFT analysis choice.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(w: Waveform, cfg: DspConfig) -> np.ndarray:
    """Complex spectrogram of shape (n_frames, fft_size/2 + 1)."""
    if len(w.samples) == 0:
        raise InvalidInput("cannot compute STFT of an empty waveform")
    frames = _frame_signal(np.asarray(w.samples, dtype=np.float64), cfg)
    frames = frames * _hann(cfg.frame_len)[None, :]
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, fft_size/2 + 1), peak 1."""
    n_freqs = cfg.fft_size // 2 + 1
    freqs = np.linspace(0.0, cfg.sample_rate / 2.0, n_freqs)
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2.0), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)

    fb = np.zeros((cfg.n_mels, n_freqs))
    for m in range(cfg.n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / (ctr - lo)
        down = (hi - freqs) / (hi - ctr)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        if not np.any(fb[m] > 0):
            raise InvalidConfig(f"mel filter {m} is empty; reduce n_mels")
    return fb


def filter_center_freqs(cfg: DspConfig) -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2.0), cfg.n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


def log_mel_energy(w: Waveform, cfg: DspConfig) -> FeatureMap:
    """Log mel-band energy features, shape (n_frames, n_mels)."""
    spec = stft(w, cfg)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    return FeatureMap(logmel.astype(np.float32))


def read_wav(path) -> Waveform:
    """Read a mono PCM16 little-endian WAV file. Stereo is rejected."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such file: {path}")
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise InvalidInput(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise InvalidInput(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write float samples in [-1, 1] as a mono PCM16 WAV file."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def extract_features(w: Waveform, cfg: DspConfig) -> FeatureMap:
    """log_mel_energy with a sample-rate guard; resampling is unsupported."""
    if w.sample_rate != cfg.sample_rate:
        raise InvalidInput(
            f"waveform rate {w.sample_rate} != configured rate {cfg.sample_rate}; "
            "resampling is not supported"
        )
    return log_mel_energy(w, cfg)


def write_feature_file(path, fm: FeatureMap) -> None:
    """Binary feature format: magic LMEL, u32 version, u32 T, u32 D, f32 data."""
    header = struct.pack("<4sIII", FEATURE_MAGIC, FEATURE_VERSION, fm.n_frames, fm.n_bins)
    data = np.ascontiguousarray(fm.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_feature_file(path) -> FeatureMap:
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such feature file: {path}")
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise ParseError(f"{path}: truncated header")
        magic, version, t, d = struct.unpack("<4sIII", header)
        if magic != FEATURE_MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}")
        if version != FEATURE_VERSION:
            raise ParseError(f"{path}: unsupported version {version}")
        payload = fh.read(4 * t * d)
    if len(payload) != 4 * t * d:
        raise ParseError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(t, d)
    return FeatureMap(data.copy())

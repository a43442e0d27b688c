"""Waveform I/O, log-mel / MFCC features and stream segmentation."""

from dataclasses import dataclass
import struct
import wave

import numpy as np
from scipy.fft import dct, idct
from scipy.signal import get_window

SAMPLE_RATE = 16000
ENERGY_FLOOR = 1e-10


class AudioFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, D)
    shift: float
    kind: str = "log-mel"
    window: float = 0.030

    @property
    def shape(self):
        return self.frames.shape


def read_wav(path):
    """Read a mono 16-bit PCM WAV file, scaled to [-1, 1) by 1/32768."""
    try:
        with wave.open(str(path), "rb") as fh:
            nch, width, rate, n = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
            if fh.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: compressed WAV ({fh.getcomptype()}) not supported")
            if nch != 1:
                raise AudioFormatError(f"{path}: expected mono, found {nch} channels")
            if width != 2:
                raise AudioFormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
            raw = fh.readframes(n)
    except (wave.Error, EOFError) as err:
        raise AudioFormatError(f"{path}: malformed WAV ({err})") from None
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w):
    """Write ``w`` as mono 16-bit PCM (values clipped to the int16 range)."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate, fmin=0.0, fmax=None):
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def frame_count(n_samples, window_samples, shift_samples):
    return (n_samples - window_samples) // shift_samples + 1


def _frames(w, window, shift):
    win = int(round(window * w.sample_rate))
    hop = int(round(shift * w.sample_rate))
    if len(w) < win:
        raise ValueError(f"waveform of {len(w)} samples is shorter than one {win}-sample window")
    framed = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::hop]
    return framed, win


def power_spectrum(w, window=0.030, shift=0.010):
    """Hann-windowed |FFT|^2 frames; FFT size is the next power of two."""
    framed, win = _frames(w, window, shift)
    n_fft = 1 << (win - 1).bit_length()
    spec = np.fft.rfft(framed * get_window("hann", win), n=n_fft)
    return spec.real ** 2 + spec.imag ** 2, n_fft


def log_mel(w, window=0.030, shift=0.010, n_mels=40):
    """Log mel-filterbank energies.

    Returns:
        FeatureMatrix with ``floor((N - win) / hop) + 1`` frames of ``n_mels``.
    """
    power, n_fft = power_spectrum(w, window, shift)
    fb = mel_filterbank(n_mels, n_fft, w.sample_rate)
    return FeatureMatrix(np.log(power @ fb.T + ENERGY_FLOOR), shift, "log-mel", window)


def mfcc(w, window=0.030, shift=0.010, n_coeffs=40, n_mels=40):
    """Orthonormal type-II DCT of log-mel frames, first ``n_coeffs`` kept."""
    if n_coeffs > n_mels:
        raise ValueError("n_coeffs cannot exceed n_mels")
    lm = log_mel(w, window, shift, n_mels)
    coeffs = dct(lm.frames, type=2, norm="ortho", axis=-1)[:, :n_coeffs]
    return FeatureMatrix(coeffs, shift, "mfcc", window)


def mfcc_to_log_mel(coeffs):
    """Invert a full-length (n_coeffs == n_mels) MFCC matrix."""
    return idct(coeffs, type=2, norm="ortho", axis=-1)


def extract(w, kind="log-mel", window=0.030, shift=0.010, dim=40):
    if kind == "log-mel":
        return log_mel(w, window, shift, dim)
    if kind == "mfcc":
        return mfcc(w, window, shift, dim, n_mels=max(dim, 40))
    raise ValueError(f"unknown feature kind {kind!r}")


def segment_stream(w, segment=1.0):
    """Cut ``w`` into consecutive non-overlapping ``segment``-second pieces.

    A trailing remainder shorter than one segment is dropped.
    """
    if segment <= 0:
        raise ValueError("segment length must be positive")
    n = int(round(segment * w.sample_rate))
    count = len(w) // n
    return [Waveform(w.samples[i * n:(i + 1) * n].copy(), w.sample_rate) for i in range(count)]


def add_noise(w, level, rng):
    """Additive white Gaussian noise with standard deviation ``level``."""
    return Waveform(w.samples + level * rng.standard_normal(len(w)), w.sample_rate)


# feature cache -------------------------------------------------------------

FEATURE_MAGIC = b"PKFT"
FEATURE_VERSION = 1
_KINDS = {"log-mel": 0, "mfcc": 1}


def save_features(path, fm, sample_rate=SAMPLE_RATE):
    """Header ``<4s H I I B I I`` (magic, version, T, D, kind, window, shift
    in samples) followed by T*D little-endian float64 values, row-major."""
    t, d = fm.frames.shape
    header = struct.pack(
        "<4sHIIBII", FEATURE_MAGIC, FEATURE_VERSION, t, d, _KINDS[fm.kind],
        int(round(fm.window * sample_rate)), int(round(fm.shift * sample_rate)),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(fm.frames, dtype="<f8").tobytes())


def load_features(path, sample_rate=SAMPLE_RATE):
    with open(path, "rb") as fh:
        blob = fh.read()
    size = struct.calcsize("<4sHIIBII")
    magic, version, t, d, kind, win, hop = struct.unpack_from("<4sHIIBII", blob)
    if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
        raise ValueError(f"{path}: not a feature cache file")
    frames = np.frombuffer(blob, dtype="<f8", count=t * d, offset=size).reshape(t, d).astype(np.float64)
    kind_name = {v: k for k, v in _KINDS.items()}[kind]
    return FeatureMatrix(frames, hop / sample_rate, kind_name, win / sample_rate)

"""Deterministic synthetic keyword/speaker corpus.

Speaker identity lives in the glottal source and the vocal tract: base pitch,
spectral tilt and a formant scale factor.  Keyword identity lives in a
sequence of three vowel targets (formant trajectories) plus an optional
fricative burst.  The two factors are rendered independently, so a model can
learn either one without the other.
"""

from dataclasses import dataclass, asdict
from itertools import combinations

import numpy as np
from scipy.interpolate import interp1d

from .features import SAMPLE_RATE, Waveform

COMMAND_WORDS = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"]
UNKNOWN_WORDS = [
    "bed", "bird", "cat", "dog", "eight", "five", "four", "happy", "house", "marvin",
    "nine", "one", "seven", "sheila", "six", "three", "tree", "two", "wow", "zero",
]
UNKNOWN_OFFSET = 100
SILENCE_WORD = -1

# (F1, F2, F3) in Hz for ten vowel qualities
VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240], [530, 1840, 2480],
    [570, 840, 2410], [660, 1720, 2410], [490, 1350, 1690], [520, 1190, 2390],
    [390, 1990, 2550], [440, 1020, 2240],
], dtype=np.float64)
BANDWIDTHS = np.array([90.0, 130.0, 180.0])
JITTER = 0.03  # relative per-formant target variation between renditions

_VOCAB_SEED = 0x5EED
_SPEAKER_TAG = 0x5BEA


@dataclass
class SyntheticConfig:
    n_speakers: int = 8
    n_keywords: int = 5
    utts_per_pair: int = 10
    seed: int = 0
    noise_level: float = 0.01
    sample_rate: int = SAMPLE_RATE
    duration: float = 1.0
    n_unknown_words: int = 0
    silence_per_speaker: int = 0
    val_fraction: float = 0.25
    test_fraction: float = 0.25

    def __post_init__(self):
        for name in ("n_speakers", "n_keywords", "utts_per_pair", "sample_rate"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_keywords > len(COMMAND_WORDS) + 90:
            raise ValueError("too many keywords")
        if self.n_unknown_words > len(UNKNOWN_WORDS):
            raise ValueError(f"at most {len(UNKNOWN_WORDS)} unknown words")
        if self.duration <= 0 or self.noise_level < 0:
            raise ValueError("duration must be positive and noise level non-negative")

    def to_dict(self):
        return asdict(self)


def word_name(word):
    if word == SILENCE_WORD:
        return "_silence_"
    if word >= UNKNOWN_OFFSET:
        return UNKNOWN_WORDS[word - UNKNOWN_OFFSET]
    return COMMAND_WORDS[word] if word < len(COMMAND_WORDS) else f"word{word}"


_VOWEL_SETS = list(combinations(range(len(VOWELS)), 3))
_SET_ORDER = np.random.default_rng(_VOCAB_SEED).permutation(len(_VOWEL_SETS))


def keyword_pattern(word):
    """Vowel sequence, glide direction and fricative placement of a word.

    Distinct word indices below 120 get distinct vowel sets.
    """
    slot = word if word < UNKNOWN_OFFSET else len(COMMAND_WORDS) + (word - UNKNOWN_OFFSET)
    rng = np.random.default_rng([_VOCAB_SEED, slot])
    vowels = np.array(_VOWEL_SETS[_SET_ORDER[slot % len(_VOWEL_SETS)]])
    return {
        "vowels": rng.permutation(vowels),
        "glide": float(rng.choice([-1.0, 1.0])) * rng.uniform(0.05, 0.15),
        "fricative": int(rng.integers(0, 3)),  # 0 none, 1 onset, 2 offset
    }


def speaker_traits(seed, speaker):
    rng = np.random.default_rng([seed, _SPEAKER_TAG, speaker])
    return {
        "f0": float(np.exp(rng.uniform(np.log(85.0), np.log(255.0)))),
        "tilt_db": float(rng.uniform(-10.0, -2.0)),
        "tract": float(rng.uniform(0.88, 1.14)),
        "contour": float(rng.uniform(-0.12, 0.12)),
    }


def render(seed, speaker, word, instance, noise_level=0.01, sample_rate=SAMPLE_RATE, duration=1.0):
    """Render one utterance; identical arguments give identical samples."""
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng([seed, speaker, word + 1, instance])
    if word == SILENCE_WORD:
        gain = rng.uniform(0.5, 2.0)
        return Waveform(gain * noise_level * rng.standard_normal(n), sample_rate)

    spk = speaker_traits(seed, speaker)
    pat = keyword_pattern(word)
    t = np.arange(n) / sample_rate

    onset = rng.uniform(0.08, 0.2) * duration
    length = rng.uniform(0.55, 0.7) * duration
    length = min(length, duration - onset - 0.02 * duration)

    # formant trajectories on a 5 ms grid
    grid = np.linspace(0.0, duration, int(duration * 200) + 1)
    rel = np.clip((grid - onset) / length, 0.0, 1.0)
    targets = VOWELS[pat["vowels"]] * spk["tract"] * rng.uniform(1 - JITTER, 1 + JITTER, size=(3, 3))
    knots = np.array([0.0, 1 / 6, 0.5, 5 / 6, 1.0])
    knot_vals = np.vstack([targets[0], targets[0], targets[1], targets[2], targets[2]])
    formants = np.stack([np.interp(rel, knots, knot_vals[:, j]) for j in range(3)], axis=1)
    formants *= (1.0 + pat["glide"] * (rel - 0.5))[:, None]

    f0_grid = spk["f0"] * rng.uniform(0.97, 1.03) * (1.0 + spk["contour"] * (rel - 0.5))
    f0 = np.interp(t, grid, f0_grid)
    n_harm = int(min(6000.0, sample_rate / 2 - 300) // f0_grid.max())
    harm = np.arange(1, n_harm + 1)

    freqs = harm[:, None] * f0_grid[None, :]  # (H, G)
    env = np.zeros_like(freqs)
    for j in range(3):
        env += np.exp(-0.5 * ((freqs - formants[None, :, j]) / BANDWIDTHS[j]) ** 2) / (j + 1)
    env += 0.02
    env *= 10.0 ** (spk["tilt_db"] * np.log2(freqs / 100.0) / 20.0)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    phase0 = rng.uniform(0, 2 * np.pi, size=n_harm)
    carriers = np.sin(harm[:, None] * phase[None, :] + phase0[:, None])  # (H, N)
    voiced = _modulate(env, carriers, grid, t)

    active = np.clip((t - onset) / 0.03, 0, 1) * np.clip((onset + length - t) / 0.05, 0, 1)
    voiced *= active

    if pat["fricative"]:
        start = onset - 0.07 if pat["fricative"] == 1 else onset + length - 0.01
        burst = _band_noise(rng, n, sample_rate, 3500.0, 6500.0)
        win = np.clip(1.0 - np.abs(t - (start + 0.04)) / 0.04, 0, 1)
        voiced = voiced + 0.25 * np.std(voiced[active > 0.5]) * burst * win / (np.std(burst) + 1e-12)

    peak = np.max(np.abs(voiced))
    sig = voiced / peak * 0.5 * rng.uniform(0.6, 1.0)
    sig += noise_level * rng.standard_normal(n)
    return Waveform(sig, sample_rate)


def _modulate(env, carriers, grid, t):
    """Sum of carriers weighted by envelopes linearly interpolated from ``grid``."""
    n = carriers.shape[1]
    g = len(grid) - 1
    if n % g == 0:
        step = n // g
        frac = np.arange(step) / step
        blocks = carriers.reshape(len(carriers), g, step)
        lo = np.einsum("hg,hgs->gs", env[:, :-1], blocks)
        hi = np.einsum("hg,hgs->gs", env[:, 1:], blocks)
        return (lo * (1.0 - frac) + hi * frac).reshape(n)
    amp = interp1d(grid, env, axis=1, assume_sorted=True)(t)
    return np.einsum("hn,hn->n", amp, carriers)


def _band_noise(rng, n, sample_rate, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(f < lo) | (f > hi)] = 0.0
    return np.fft.irfft(spec, n)


def source_string(seed, speaker, word, instance, noise_level, sample_rate, duration):
    return (f"synth:seed={seed},spk={speaker},word={word},inst={instance},"
            f"noise={noise_level!r},sr={sample_rate},dur={duration!r}")


def parse_source(source):
    if not source.startswith("synth:"):
        raise ValueError(f"not a synthetic source: {source!r}")
    fields = dict(item.split("=") for item in source[len("synth:"):].split(","))
    return {
        "seed": int(fields["seed"]), "speaker": int(fields["spk"]), "word": int(fields["word"]),
        "instance": int(fields["inst"]), "noise_level": float(fields["noise"]),
        "sample_rate": int(fields["sr"]), "duration": float(fields["dur"]),
    }


def render_source(source):
    return render(**parse_source(source))


def speaker_splits(cfg):
    """Assign each synthetic speaker index to train / validation / test."""
    order = np.random.default_rng([cfg.seed, 0x5B17]).permutation(cfg.n_speakers)
    n_test = int(round(cfg.test_fraction * cfg.n_speakers))
    n_val = int(round(cfg.val_fraction * cfg.n_speakers))
    split = {}
    for rank, spk in enumerate(order):
        split[int(spk)] = "test" if rank < n_test else "validation" if rank < n_test + n_val else "train"
    return split


def synthetic_stream(seed, n_segments, words, noise_level=0.01, sample_rate=SAMPLE_RATE,
                     n_speakers=20, silence_every=0):
    """A continuous stream of one-second renditions by a fresh speaker pool.

    Args:
        seed: speaker-pool seed; choose one not used for the enrolled corpus.
        n_segments: number of one-second pieces.
        words: word indices to draw renditions from.
        silence_every: if > 0, every k-th piece is noise only.

    Returns:
        (Waveform, list of (speaker, word) per piece)
    """
    rng = np.random.default_rng([seed, 0x57EA])
    pieces, labels = [], []
    for i in range(n_segments):
        if silence_every and (i + 1) % silence_every == 0:
            spk, word = -1, SILENCE_WORD
        else:
            spk, word = int(rng.integers(n_speakers)), int(rng.choice(words))
        pieces.append(render(seed, max(spk, 0), word, i, noise_level, sample_rate, 1.0).samples)
        labels.append((spk, word))
    return Waveform(np.concatenate(pieces), sample_rate), labels

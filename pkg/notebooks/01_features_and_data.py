"""
Synthetic speech, log-mel features and the pair protocol
========================================================

A tour of the data side of ``pkmtl``: how synthetic utterances are built,
what the features look like, and how evaluation pairs are drawn.

Run with ``python3 notebooks/01_features_and_data.py``.
"""

import numpy as np

from pkmtl import dataset, features, synthetic

# A synthetic utterance is fully determined by (corpus seed, speaker, word,
# instance).  The *word* fixes a temporal pattern of formant-like tracks; the
# *speaker* fixes pitch and a spectral filter; the *instance* adds timing
# jitter and noise.
w = synthetic.render(0, 2, 1, 0)
print(f"one rendition: {len(w.samples)} samples at {w.sample_rate} Hz, peak {np.abs(w.samples).max():.3f}")

# Log-mel features: 30 ms windows every 10 ms, 512-point FFT, 40 HTK mel bands.
fm = features.log_mel(w)
print("log-mel frames:", fm.frames.shape)  # (98, 40) for one second

# Renditions of the same word by the same speaker resemble each other more than
# different words by that speaker do.  Compare whole time-frequency images
# after removing each band's mean.
def similarity(a, b):
    a, b = (features.log_mel(x).frames for x in (a, b))
    a, b = a - a.mean(axis=0), b - b.mean(axis=0)
    return np.corrcoef(a.ravel(), b.ravel())[0, 1]


ref = synthetic.render(0, 1, 1, 0)
same = np.mean([similarity(ref, synthetic.render(0, 1, 1, i)) for i in (1, 2, 3)])
other = np.mean([similarity(ref, synthetic.render(0, 1, w, 0)) for w in (0, 2, 3)])
print(f"time-frequency correlation: same word {same:.3f}, different words {other:.3f}")

# MFCCs are the DCT of the log-mel frames.
print("MFCC frames:", features.extract(w, "mfcc", dim=40).frames.shape)

# A small corpus with Unknown words and Silence clips.  Speakers are assigned
# to exactly one of train / validation / test.
cfg = synthetic.SyntheticConfig(n_speakers=12, n_keywords=4, utts_per_pair=3, n_unknown_words=1,
                                silence_per_speaker=1, seed=5)
utts = dataset.generate_synthetic(cfg)
print("corpus summary:", dataset.summarize(utts))
print("keyword classes:", dataset.keyword_classes(utts))

# Evaluation pairs: each anchor (a command word, never Unknown/Silence) gets
# one test utterance from each category ts-tk, nts-tk, ts-ntk, nts-ntk.
test = [u for u in utts if u.split == "test"]
(split,) = dataset.make_pair_splits(test, 1, 16, seed=0)
by_id = {u.id: u for u in test}
for p in split.pairs[:4]:
    a, t = by_id[p.anchor], by_id[p.test]
    print(f"  {p.category:8s} anchor=({a.speaker}, {a.keyword})  test=({t.speaker or '-'}, {t.keyword})")

# The task decides which categories are positives and negatives.
for task in ("C", "TB", "TO"):
    pos, neg = dataset.task_partition(split, task)
    cats = lambda ps: sorted({p.category for p in ps})
    print(f"{task:2s}: positives {cats(pos)}  negatives {cats(neg)}")

# A continuous stream for the general-negative protocol is cut into full
# one-second segments; a trailing remainder is dropped.
wav, labels = synthetic.synthetic_stream(1, 5, [0, 1, synthetic.UNKNOWN_OFFSET])
print("stream segments:", len(features.segment_stream(wav)), "(speaker, word) per segment:", labels)

"""
Threshold metrics and the streaming false-alarm protocol
========================================================

How EER, FRR@FAR and FAR@FRR are computed from a set of scores.  Then
false alarms are measured on a continuous stream of non-enrolled speakers
saying the target keywords.

Run with ``python3 notebooks/03_metrics_and_streams.py``.
"""

import tempfile

import numpy as np

from pkmtl import adaptation as A, dataset, evaluation as E, features, metrics, model as M, synthetic

# A trial is accepted iff score > threshold.  The candidate thresholds are
# -inf, every distinct score and +inf, so each metric is an exact point on the
# FAR/FRR curve.
s = metrics.ScoreSet(positive=[0.9, 0.8, 0.35, 0.3], negative=[0.5, 0.4, 0.2, 0.1])
for delta, far, frr in metrics.far_frr_curve(s):
    print(f"  delta {delta:>5}: FAR {far:.2f}  FRR {frr:.2f}")
print("EER (value, threshold):", metrics.eer(s))          # ties go to the smallest threshold
print("FRR at FAR <= 0.25:", metrics.frr_at_far(s, 0.25))  # smallest delta meeting the FAR budget
print("FAR at FRR <= 0.5:", metrics.far_at_frr(s, 0.5))    # largest delta meeting the FRR budget

# Thresholds remember where they came from, and evaluation refuses to apply a
# threshold tuned on the very split it is scoring.
th = metrics.select_threshold(s, "frr-constrained", "pairs:0", 0.25)
print("threshold:", th)

# ---------------------------------------------------------------------------
# A small trained system for the streaming protocol.
cfg = synthetic.SyntheticConfig(n_speakers=16, n_keywords=4, utts_per_pair=5, n_unknown_words=1,
                                silence_per_speaker=3, seed=11)
utts = dataset.generate_synthetic(cfg)
feats = dataset.compute_features(utts)
idx = {sp: [i for i, u in enumerate(utts) if u.split == sp] for sp in dataset.SPLITS}
sub = {sp: [utts[i] for i in ix] for sp, ix in idx.items()}
kw, spk = dataset.keyword_classes(sub["train"]), dataset.speaker_classes(sub["train"])
kt, st = M.label_indices(sub["train"], kw, spk)
mtl = M.train_mtl(M.MtlModel.create(M.EncoderConfig(), kw, spk, seed=0), feats[idx["train"]], kt, st,
                  epochs=20, seed=0).model
system = A.PkMtlSystem(mtl)
table = A.EmbeddingTable.build(mtl, sub["test"], feats[idx["test"]])
splits = dataset.make_pair_splits(sub["test"], 3, 400, seed=1)

# The stream: 200 one-second pieces from 20 speakers who are not enrolled.
# They say the command words, two non-command words, and every tenth piece is
# silence.
words = list(range(4)) + [synthetic.UNKNOWN_OFFSET, synthetic.UNKNOWN_OFFSET + 1]
wav, _ = synthetic.synthetic_stream(2024, 200, words, silence_every=10)
with tempfile.TemporaryDirectory() as tmp:  # WAV round trip, as with a recorded stream
    features.write_wav(f"{tmp}/stream.wav", wav)
    wav = features.read_wav(f"{tmp}/stream.wav")
x = np.stack([features.extract(piece).frames for piece in features.segment_stream(wav)])
segments = M.embed_batch(mtl, x)

# Each test split fixes its threshold at the target FRR on its own ts-tk pair
# scores.  Every segment is then paired with every target keyword's enrolled
# anchors, and FAR is macro-averaged over keywords.
for label, task, mech in (("keyword-only", "C", "keyword-only"), ("TO, SCM alpha=0.5", "TO", "scm")):
    res = E.evaluate_stream(system, table, segments, splits, task, mech, alpha=0.5)
    print(f"{label:18s} FAR@FRR1% {res['far@frr0.01'][0]:.4f}  FAR@FRR5% {res['far@frr0.05'][0]:.4f}")

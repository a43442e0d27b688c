"""
Multi-task training, SCM and TRM
================================

Train the shared-encoder keyword/speaker model on a small synthetic corpus.
Then adapt it to the target-user tasks with both mechanisms:

* score combination (SCM): fixed at alpha=0.5, and grid-searched;
* the task representation module (TRM).

Finally compare the mechanisms on held-out pairs.  This runs in about a
minute on a laptop CPU.

Run with ``python3 notebooks/02_train_and_adapt.py``.
"""

import time

from pkmtl import adaptation as A, dataset, evaluation as E, model as M, synthetic

t0 = time.time()
cfg = synthetic.SyntheticConfig(n_speakers=24, n_keywords=4, utts_per_pair=4, n_unknown_words=1,
                                silence_per_speaker=2, seed=11)
utts = dataset.generate_synthetic(cfg)
feats = dataset.compute_features(utts)
idx = {s: [i for i, u in enumerate(utts) if u.split == s] for s in dataset.SPLITS}
sub = {s: [utts[i] for i in ix] for s, ix in idx.items()}

# Class inventories come from the training speakers only.  Silence clips have
# no speaker, so their speaker label is -1 and they drop out of the speaker loss.
kw_classes = dataset.keyword_classes(sub["train"])
spk_classes = dataset.speaker_classes(sub["train"])
kw_t, spk_t = M.label_indices(sub["train"], kw_classes, spk_classes)
print(f"{len(kw_classes)} keyword classes, {len(spk_classes)} training speakers")

# The loss is L = L_keyword + lambda * L_speaker, with lambda = 0.1.  Both heads
# are cosine classifiers.  The epoch with the best validation keyword accuracy
# is kept.
val = M.build_validation(sub["validation"], feats[idx["validation"]], kw_classes)
init = M.MtlModel.create(M.EncoderConfig(), kw_classes, spk_classes, seed=0)
result = M.train_mtl(init, feats[idx["train"]], kw_t, spk_t, epochs=25, seed=0, lam=0.1, validation=val)
mtl = result.model
last = result.history[result.best_epoch - 1]
print(f"best epoch {result.best_epoch}: keyword accuracy {last['keyword_accuracy']:.3f}, "
      f"speaker EER {last['speaker_eer']:.3f}")

# Embedding tables cache (keyword, speaker) embeddings per utterance, so pair
# scoring is cheap.
system = A.PkMtlSystem(mtl)
tables = {s: A.EmbeddingTable.build(mtl, sub[s], feats[idx[s]]) for s in dataset.SPLITS}
val_split = dataset.make_pair_splits(sub["validation"], 1, 2000, seed=1)[0]
test_splits = dataset.make_pair_splits(sub["test"], 3, 2000, seed=2)

# SCM grid search: pick the alpha with the lowest validation FRR at FAR 1 %.
# The TRM is trained on the frozen embeddings with an angular prototypical loss.
# The epoch with the best validation EER is kept (epoch 0 = untrained, i.e. SCM-0.5).
for task in ("TB", "TO"):
    system.scm[task] = A.tune_scm(system, tables["validation"], val_split, task)
    trm = A.TrmModule(task, mtl.config.embed_dim, seed=0)
    res = A.train_trm(trm, mtl, sub["train"], feats[idx["train"]], epochs=20, seed=0, lr=1e-3,
                      validation=A.validation_eer_fn(system, tables["validation"], val_split, task),
                      embeddings=(tables["train"].zk, tables["train"].zs))
    system.trm[task] = res.module
    print(f"{task}: grid-searched alpha = {system.scm[task].alpha:.2f}, TRM best epoch {res.best_epoch}")

# Compare every mechanism on the test pairs (mean EER over three splits).
print(f"\n{'':14s}{'C-KWS':>8s}{'TB-KWS':>8s}{'TO-KWS':>8s}")
for row, mech, alpha in E.MECHANISM_ROWS:
    cells = []
    for task in ("C", "TB", "TO"):
        if task == "C" and mech != "keyword-only":
            cells.append(f"{'-':>8s}")
            continue
        ev = E.evaluate_task(system, tables["test"], test_splits, task, mech, alpha)
        cells.append(f"{ev.summary['eer'][0]:8.4f}")
    print(f"{row:14s}" + "".join(cells))
print(f"\nparameters: MTL {mtl.n_params()['total']}, TRM (TO) "
      f"{sum(p.data.size for p in system.trm['TO'].params.values())}; {time.time() - t0:.0f}s")

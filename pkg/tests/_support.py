"""Shared helpers for the test suites: gradient checking, brute-force metric
oracles and the desk-scale experiment used by the acceptance tests."""

import time

import numpy as np

from pkmtl import adaptation, autodiff as ad, dataset, evaluation, features, model, synthetic
from pkmtl.autodiff import Tensor

# ---------------------------------------------------------------- gradient checking

FD_STEP = 1e-5
GRAD_TOL = 1e-4


def numeric_grad(fn, p, coords, step=FD_STEP):
    """Central finite differences of scalar ``fn()`` w.r.t. ``p.data`` at ``coords``."""
    out = np.zeros(len(coords))
    p.data = np.array(p.data, dtype=np.float64)  # own, writable, possibly 0-d
    flat = p.data.flat
    for n, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + step
        hi = float(fn().data)
        flat[i] = old - step
        lo = float(fn().data)
        flat[i] = old
        out[n] = (hi - lo) / (2 * step)
    return out


def relative_error(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / scale)


def gradient_error(fn, params, rng=None, max_coords=None):
    """Relative error ``|g - g_fd| / max(|g|, |g_fd|)`` between the analytic and
    the finite-difference gradient, concatenated over all ``params``.

    With ``max_coords``, larger parameters are checked on a random subset of
    coordinates.
    """
    for p in params.values():
        p.grad = None
    analytic = ad.backward(fn(), params)
    a_all, n_all = [], []
    for k, p in params.items():
        coords = np.arange(p.data.size)
        if max_coords is not None and p.data.size > max_coords:
            coords = np.sort(rng.choice(p.data.size, size=max_coords, replace=False))
        n_all.append(numeric_grad(fn, p, coords))
        a_all.append(analytic[k].reshape(-1)[coords])
    return relative_error(np.concatenate(a_all), np.concatenate(n_all))


def _param(rng, shape, name, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x) + 0.05 * (x == 0), x)
    return Tensor(x, requires_grad=True, name=name)


def _project(out, rng):
    """Random linear functional making any output a scalar loss."""
    return ad.total(ad.mul(out, Tensor(rng.standard_normal(out.shape))))


def _case(build):
    def make(rng):
        return build(rng)
    return make


def primitive_cases():
    """name -> builder(rng) -> (loss function, params)."""
    cases = {}

    def binary(op, shape_a=(3, 4), shape_b=(3, 4)):
        def build(rng):
            a, b = _param(rng, shape_a, "a"), _param(rng, shape_b, "b")
            w = Tensor(rng.standard_normal(op(Tensor(a.data), Tensor(b.data)).shape))
            return (lambda: ad.total(ad.mul(op(a, b), w))), {"a": a, "b": b}
        return build

    def unary(op, shape=(3, 5), away=False, positive=False):
        def build(rng):
            x = _param(rng, shape, "x", away)
            if positive:
                x.data = np.abs(x.data) + 0.5
            w = Tensor(rng.standard_normal(op(Tensor(x.data)).shape))
            return (lambda: ad.total(ad.mul(op(x), w))), {"x": x}
        return build

    cases["add"] = binary(ad.add)
    cases["add-broadcast"] = binary(ad.add, (3, 4), (4,))
    cases["mul"] = binary(ad.mul)
    cases["mul-broadcast"] = binary(ad.mul, (2, 3, 4), (1, 4))
    cases["neg"] = unary(ad.neg)
    cases["relu"] = unary(ad.relu, away=True)
    cases["sigmoid"] = unary(ad.sigmoid)
    cases["exp"] = unary(ad.exp)
    cases["log"] = unary(ad.log, positive=True)
    cases["mean_all"] = unary(ad.mean_all)
    cases["total"] = unary(ad.total)
    cases["mean_time"] = unary(ad.mean_time, shape=(2, 6, 3))
    cases["transpose"] = unary(ad.transpose)
    cases["take"] = unary(lambda x: ad.take(x, (np.array([0, 2, 2]), slice(None))))
    cases["l2_normalize"] = unary(ad.l2_normalize)
    cases["log_softmax"] = unary(ad.log_softmax)
    cases["softmax"] = unary(ad.softmax)
    cases["matmul"] = binary(ad.matmul, (3, 4), (4, 2))
    cases["cosine_matrix"] = binary(ad.cosine_matrix, (3, 5), (4, 5))
    cases["cosine"] = binary(ad.cosine, (3, 5), (3, 5))

    def concat(rng):
        a, b = _param(rng, (3, 2), "a"), _param(rng, (3, 4), "b")
        w = Tensor(rng.standard_normal((3, 6)))
        return (lambda: ad.total(ad.mul(ad.concat([a, b]), w))), {"a": a, "b": b}

    def scale_shift(rng):
        x, s, b = _param(rng, (4, 3), "x"), _param(rng, (), "s"), _param(rng, (), "b")
        w = Tensor(rng.standard_normal((4, 3)))
        return (lambda: ad.total(ad.mul(ad.scale_shift(x, s, b), w))), {"x": x, "s": s, "b": b}

    def affine(rng):
        x, W, b = _param(rng, (5, 3), "x"), _param(rng, (3, 4), "W"), _param(rng, (4,), "b")
        w = Tensor(rng.standard_normal((5, 4)))
        return (lambda: ad.total(ad.mul(ad.affine(x, W, b), w))), {"x": x, "W": W, "b": b}

    def conv(stride):
        def build(rng):
            x, W, b = _param(rng, (2, 9, 3), "x"), _param(rng, (3, 3, 4), "W"), _param(rng, (4,), "b")
            t_out = (9 - 3) // stride + 1
            w = Tensor(rng.standard_normal((2, t_out, 4)))
            return (lambda: ad.total(ad.mul(ad.conv1d(x, W, b, stride), w))), {"x": x, "W": W, "b": b}
        return build

    def nll(rng):
        x = _param(rng, (5, 4), "x")
        t = rng.integers(0, 4, size=5)
        wts = (rng.random(5) < 0.7).astype(float)
        wts[0] = 1.0
        return (lambda: ad.nll(ad.log_softmax(x), t, wts)), {"x": x}

    def cross_entropy(rng):
        x = _param(rng, (6, 3), "x")
        t = rng.integers(0, 3, size=6)
        return (lambda: ad.cross_entropy(x, t)), {"x": x}

    cases["concat"] = concat
    cases["scale_shift"] = scale_shift
    cases["affine"] = affine
    cases["conv1d"] = conv(1)
    cases["conv1d-stride2"] = conv(2)
    cases["nll"] = nll
    cases["cross_entropy"] = cross_entropy
    return cases


def tiny_encoder(input_dim=5, embed_dim=3):
    layers = [
        {"kind": "conv1d", "out": 4, "kernel": 3, "stride": 1},
        {"kind": "relu"},
        {"kind": "conv1d", "out": 4, "kernel": 3, "stride": 2},
        {"kind": "relu"},
        {"kind": "mean-pool-time"},
        {"kind": "affine", "out": embed_dim},
    ]
    return model.EncoderConfig(input_dim=input_dim, layers=layers, split=5, embed_dim=embed_dim)


def composed_cases():
    """Keyword/speaker classification loss, multi-task loss and the TRM loss."""

    def classification(rng):
        z = _param(rng, (6, 4), "z")
        W = _param(rng, (4, 5), "W")
        s = Tensor(np.array(rng.uniform(2, 12)), requires_grad=True, name="scale")
        b = Tensor(np.array(rng.uniform(-6, 0)), requires_grad=True, name="bias")
        clf = model.CosineClassifier(W, s, b)
        t = rng.integers(0, 5, size=6)
        return (lambda: model.classification_loss(clf, z, t)), {"z": z, "W": W, "scale": s, "bias": b}

    def mtl(rng):
        m = model.MtlModel.create(tiny_encoder(), ["a", "b", "c"], ["s1", "s2"], seed=int(rng.integers(1 << 30)))
        for p in m.params.values():  # move weights off their init so relus are in generic position
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
        x = rng.standard_normal((4, 11, 5))
        kw = rng.integers(0, 3, size=4)
        spk = rng.integers(-1, 2, size=4)
        spk[0] = 0
        lam = float(rng.uniform(0.05, 1.0))
        return (lambda: model.mtl_loss(m, x, kw, spk, lam)[0]), m.params

    def trm(rng):
        m = adaptation.TrmModule("TO", 3, seed=int(rng.integers(1 << 30)))
        for p in m.params.values():
            p.data = p.data + 0.3 * rng.standard_normal(p.shape)
        zk, zs, pk, ps = (rng.standard_normal((4, 3)) for _ in range(4))
        return (lambda: adaptation.trm_loss(m, zk, zs, pk, ps)), m.params

    return {"classification-loss": classification, "mtl-loss": mtl, "trm-loss": trm}


def run_gradient_suite(instances=50, seed=0):
    """Worst relative gradient error per case over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name, build in {**primitive_cases(), **composed_cases()}.items():
        errs = []
        for _ in range(instances):
            fn, params = build(rng)
            errs.append(gradient_error(fn, params, rng, max_coords=12))
        worst[name] = max(errs)
    return worst


# ---------------------------------------------------------------- metric oracles

def bf_rates(pos, neg, delta):
    """FAR and FRR at ``delta`` by direct counting (accept iff score > delta)."""
    fa = sum(1 for s in neg if s > delta)
    miss = sum(1 for s in pos if not s > delta)
    return fa / len(neg), miss / len(pos)


def bf_candidates(pos, neg):
    return [-np.inf] + sorted(set(pos) | set(neg)) + [np.inf]


def bf_eer(pos, neg):
    best = None
    for d in bf_candidates(pos, neg):
        far, frr = bf_rates(pos, neg, d)
        gap = abs(far - frr)
        if best is None or gap < best[0]:
            best = (gap, (far + frr) / 2, d)
    return best[1], best[2]


def bf_frr_at_far(pos, neg, c):
    for d in bf_candidates(pos, neg):
        far, frr = bf_rates(pos, neg, d)
        if far <= c:
            return frr, d
    raise AssertionError("unreachable: +inf always satisfies the constraint")


def bf_far_at_frr(pos, neg, r):
    for d in reversed(bf_candidates(pos, neg)):
        far, frr = bf_rates(pos, neg, d)
        if frr <= r:
            return far, d
    raise AssertionError("unreachable: -inf always satisfies the constraint")


def random_score_set(rng, max_size=500, total=None):
    """Random positive/negative lists, often with ties.  With ``total`` the two
    lists together hold exactly that many scores (at least one each)."""
    if total is None:
        n_pos, n_neg = int(rng.integers(1, max_size)), int(rng.integers(1, max_size))
    else:
        n_pos = int(rng.integers(1, total))
        n_neg = total - n_pos
    if rng.random() < 0.5:
        pos = np.round(rng.normal(0.5, 0.3, n_pos), int(rng.integers(1, 3)))
        neg = np.round(rng.normal(0.0, 0.3, n_neg), int(rng.integers(1, 3)))
    else:
        pos, neg = rng.normal(0.3, 0.4, n_pos), rng.normal(0.0, 0.4, n_neg)
    return pos, neg


# ---------------------------------------------------------------- desk-scale experiment

DESK = dict(
    n_speakers=60, n_keywords=6, utts_per_pair=4, n_unknown_words=2, silence_per_speaker=2, data_seed=7,
    epochs=40, trm_epochs=30, trm_lr=1e-3, val_pairs=8000, test_splits=5, test_pairs=4000, stream_segments=300,
    stream_seed=999, seeds=(0, 1, 2),
)


def desk_corpus(cfg=DESK, cache_dir=None):
    scfg = synthetic.SyntheticConfig(
        n_speakers=cfg["n_speakers"], n_keywords=cfg["n_keywords"], utts_per_pair=cfg["utts_per_pair"],
        n_unknown_words=cfg["n_unknown_words"], silence_per_speaker=cfg["silence_per_speaker"], seed=cfg["data_seed"])
    utts = dataset.generate_synthetic(scfg)
    feats = dataset.compute_features(utts, cache_dir=cache_dir)
    return scfg, utts, feats


def desk_experiment(cfg=DESK, cache_dir=None, log=print):
    """Train one system per seed on a shared synthetic corpus and evaluate
    every Table-1 row on test pairs plus the streaming protocol.

    Returns a dict with ``table1[(task, row)] -> list of per-seed summaries``,
    ``stream[row] -> list of per-seed results`` and timings.
    """
    t0 = time.time()
    scfg, utts, feats = desk_corpus(cfg, cache_dir)
    idx = {s: [i for i, u in enumerate(utts) if u.split == s] for s in dataset.SPLITS}
    sub = {s: [utts[i] for i in ix] for s, ix in idx.items()}
    kw_classes = dataset.keyword_classes(sub["train"])
    spk_classes = dataset.speaker_classes(sub["train"])
    kw_t, spk_t = model.label_indices(sub["train"], kw_classes, spk_classes)
    val = model.build_validation(sub["validation"], feats[idx["validation"]], kw_classes)
    val_split = dataset.make_pair_splits(sub["validation"], 1, cfg["val_pairs"], seed=1)[0]
    test_splits = dataset.make_pair_splits(sub["test"], cfg["test_splits"], cfg["test_pairs"], seed=2)
    words = list(range(cfg["n_keywords"])) + [synthetic.UNKNOWN_OFFSET, synthetic.UNKNOWN_OFFSET + 1]
    t_stream = time.time()
    wav, _ = synthetic.synthetic_stream(cfg["stream_seed"], cfg["stream_segments"], words, n_speakers=20,
                                        silence_every=10)
    stream_feats = np.stack([features.extract(w).frames for w in features.segment_stream(wav)])
    t_data = time.time() - t0
    out = {"table1": {}, "stream": {}, "systems": [], "timing": {"data": t_data, "stream": time.time() - t_stream}}
    for seed in cfg["seeds"]:
        m = model.MtlModel.create(model.EncoderConfig(), kw_classes, spk_classes, seed=seed)
        m = model.train_mtl(m, feats[idx["train"]], kw_t, spk_t, epochs=cfg["epochs"], seed=seed,
                            validation=val).model
        system = adaptation.PkMtlSystem(m)
        tables = {s: adaptation.EmbeddingTable.build(m, sub[s], feats[idx[s]]) for s in dataset.SPLITS}
        for task in ("TB", "TO"):
            system.scm[task] = adaptation.tune_scm(system, tables["validation"], val_split, task)
            trm = adaptation.TrmModule(task, m.config.embed_dim, seed=seed)
            res = adaptation.train_trm(
                trm, m, sub["train"], feats[idx["train"]], epochs=cfg["trm_epochs"], seed=seed, lr=cfg["trm_lr"],
                validation=adaptation.validation_eer_fn(system, tables["validation"], val_split, task),
                embeddings=(tables["train"].zk, tables["train"].zs))
            system.trm[task] = res.module
            log(f"seed {seed} {task}: alpha={system.scm[task].alpha} trm best epoch={res.best_epoch}")
        for task in ("C", "TB", "TO"):
            for row, mech, alpha in evaluation.MECHANISM_ROWS:
                if task == "C" and mech != "keyword-only":
                    continue
                ev = evaluation.evaluate_task(system, tables["test"], test_splits, task, mech, alpha)
                out["table1"].setdefault((task, row), []).append(ev.summary)
        t_stream = time.time()
        seg = model.embed_batch(m, stream_feats)
        for row, task, mech in (("keyword-only", "C", "keyword-only"), ("TO-SCM", "TO", "scm"),
                                ("TO-TRM", "TO", "trm")):
            out["stream"].setdefault(row, []).append(
                evaluation.evaluate_stream(system, tables["test"], seg, test_splits, task, mech, seed=seed))
        out["timing"]["stream"] += time.time() - t_stream
        out["systems"].append((system, tables, test_splits))
    out["timing"]["total"] = time.time() - t0
    return out


def mean_metric(summaries, metric):
    return float(np.mean([s[metric][0] for s in summaries]))


def bf_rate_table(pos, neg):
    """FAR/FRR at every candidate threshold by direct counting, vectorised over candidates."""
    d = np.array(bf_candidates(list(pos), list(neg)))
    far = np.sum(np.asarray(neg)[None, :] > d[:, None], axis=1) / len(neg)
    frr = np.sum(~(np.asarray(pos)[None, :] > d[:, None]), axis=1) / len(pos)
    return d, far, frr


def bf_all(pos, neg, c):
    """(eer, frr_at_far(c), far_at_frr(c)) by enumeration, with the same tie rules as the scalar oracles."""
    d, far, frr = bf_rate_table(pos, neg)
    i = int(np.argmin(np.abs(far - frr)))
    j = int(np.flatnonzero(far <= c)[0])
    k = int(np.flatnonzero(frr <= c)[-1])
    return ((far[i] + frr[i]) / 2, d[i]), (frr[j], d[j]), (far[k], d[k])

"""Multi-task keyword/speaker network with cosine classifiers."""

from dataclasses import dataclass, field, asdict
import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import NO_SPEAKER, SILENCE, UNKNOWN, make_sv_splits, mtl_batches
from .metrics import ScoreSet, eer

logger = logging.getLogger(__name__)

SCALE_INIT = 10.0
BIAS_INIT = -5.0


def default_layers():
    return [
        {"kind": "conv1d", "out": 32, "kernel": 5, "stride": 1},
        {"kind": "relu"},
        {"kind": "conv1d", "out": 32, "kernel": 5, "stride": 2},
        {"kind": "relu"},
        {"kind": "mean-pool-time"},
        {"kind": "affine", "out": 64},
    ]


@dataclass
class EncoderConfig:
    """Layer stack; ``layers[:split]`` is the shared trunk and ``layers[split:]``
    is instantiated once per head (keyword, speaker)."""

    input_dim: int = 40
    layers: list = field(default_factory=default_layers)
    split: int = 5
    embed_dim: int = 64

    def __post_init__(self):
        if not 0 < self.split < len(self.layers):
            raise ValueError("split index must leave at least one shared and one head layer")
        last = self.layers[-1]
        if last["kind"] != "affine" or last["out"] != self.embed_dim:
            raise ValueError("each head must end in an affine projection to embed_dim")
        kinds = {"conv1d", "affine", "relu", "mean-pool-time"}
        for layer in self.layers:
            if layer["kind"] not in kinds:
                raise ValueError(f"unknown layer kind {layer['kind']!r}")

    def to_dict(self):
        return asdict(self)


def _init_stack(prefix, layers, in_dim, rng, params):
    dim = in_dim
    for i, layer in enumerate(layers):
        kind = layer["kind"]
        if kind == "conv1d":
            k, out = layer["kernel"], layer["out"]
            params[f"{prefix}.{i}.weight"] = rng.standard_normal((k, dim, out)) * np.sqrt(2.0 / (k * dim))
            params[f"{prefix}.{i}.bias"] = np.zeros(out)
            dim = out
        elif kind == "affine":
            out = layer["out"]
            params[f"{prefix}.{i}.weight"] = rng.standard_normal((dim, out)) * np.sqrt(1.0 / dim)
            params[f"{prefix}.{i}.bias"] = np.zeros(out)
            dim = out
    return dim


def _run_stack(prefix, layers, x, p):
    for i, layer in enumerate(layers):
        kind = layer["kind"]
        if kind == "conv1d":
            x = ad.conv1d(x, p[f"{prefix}.{i}.weight"], p[f"{prefix}.{i}.bias"], layer.get("stride", 1))
        elif kind == "affine":
            x = ad.affine(x, p[f"{prefix}.{i}.weight"], p[f"{prefix}.{i}.bias"])
        elif kind == "relu":
            x = ad.relu(x)
        else:
            x = ad.mean_time(x)
    return x


class CosineClassifier:
    """``softmax(scale * cos(z, W[:, c]) + bias)`` over classes ``c``."""

    def __init__(self, weight, scale=SCALE_INIT, bias=BIAS_INIT):
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)
        self.scale = scale if isinstance(scale, Tensor) else Tensor(scale, requires_grad=True)
        self.bias = bias if isinstance(bias, Tensor) else Tensor(bias, requires_grad=True)

    @property
    def n_classes(self):
        return self.weight.shape[1]

    def logits(self, z):
        if z.ndim == 1:
            z = ad.take(z, (None, slice(None)))
        cos = ad.matmul(ad.l2_normalize(z), ad.l2_normalize(self.weight, axis=0))
        return ad.scale_shift(cos, self.scale, self.bias)


def classify(clf, z):
    """Class probabilities for one embedding (or a batch of rows)."""
    z = ad.as_tensor(z)
    if np.any(np.linalg.norm(np.atleast_2d(z.data), axis=-1) == 0):
        raise ValueError("cannot classify a zero embedding")
    p = ad.softmax(clf.logits(z)).data
    return p[0] if z.ndim == 1 else p


def classification_loss(clf, z, target, weights=None):
    """Mean ``-log p(target)``; ``target`` is a class index or index array."""
    z = ad.as_tensor(z)
    if z.ndim == 1:
        z = ad.take(z, (None, slice(None)))
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if np.any(target >= clf.n_classes) or (weights is None and np.any(target < 0)):
        raise ValueError(f"class index out of range for {clf.n_classes} classes")
    return ad.cross_entropy(clf.logits(z), target, weights)


class MtlModel:
    """Shared encoder, keyword/speaker sub-networks and cosine classifiers.

    Parameters live in :attr:`params` (name -> Tensor).  ``norm_mean`` /
    ``norm_std`` standardise features and are fitted on training data.
    """

    def __init__(self, config, keyword_classes, speaker_classes, params, norm_mean=None, norm_std=None):
        self.config = config
        self.keyword_classes = list(keyword_classes)
        self.speaker_classes = list(speaker_classes)
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True, name=k)
                       for k, v in params.items()}
        d = config.input_dim
        self.norm_mean = np.zeros(d) if norm_mean is None else np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = np.ones(d) if norm_std is None else np.asarray(norm_std, dtype=np.float64)
        self.norm_fitted = norm_mean is not None
        self.meta = {}  # extra checkpoint fields, e.g. the feature settings

    @classmethod
    def create(cls, config, keyword_classes, speaker_classes, seed=0):
        rng = np.random.default_rng([seed, 0x3D])
        params = {}
        dim = _init_stack("shared", config.layers[:config.split], config.input_dim, rng, params)
        for head in ("kw", "spk"):
            _init_stack(head, config.layers[config.split:], dim, rng, params)
        d = config.embed_dim
        for head, classes in (("kw", keyword_classes), ("spk", speaker_classes)):
            params[f"clf_{head}.weight"] = rng.standard_normal((d, len(classes)))
            params[f"clf_{head}.scale"] = np.array(SCALE_INIT)
            params[f"clf_{head}.bias"] = np.array(BIAS_INIT)
        return cls(config, keyword_classes, speaker_classes, params)

    def _clf(self, head):
        p = self.params
        return CosineClassifier(p[f"clf_{head}.weight"], p[f"clf_{head}.scale"], p[f"clf_{head}.bias"])

    @property
    def keyword_classifier(self):
        return self._clf("kw")

    @property
    def speaker_classifier(self):
        return self._clf("spk")

    def head_params(self, head):
        return {k: v for k, v in self.params.items() if k.startswith(f"{head}.") or k.startswith(f"clf_{head}.")}

    def n_params(self):
        groups = {"shared": 0, "kw": 0, "spk": 0, "clf_kw": 0, "clf_spk": 0}
        for k, v in self.params.items():
            groups[k.split(".")[0]] += v.data.size
        groups["total"] = sum(groups.values())
        return groups

    def fit_normalization(self, features):
        flat = features.reshape(-1, features.shape[-1])
        self.norm_mean = flat.mean(axis=0)
        self.norm_std = flat.std(axis=0) + 1e-8
        self.norm_fitted = True

    def forward(self, x):
        """Embeddings for a (B, T, D) feature batch; the trunk runs once."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[-1] != self.config.input_dim:
            raise ValueError(f"expected features (B, T, {self.config.input_dim}), got {x.shape}")
        h = Tensor((x - self.norm_mean) / self.norm_std)
        cfg = self.config
        h = _run_stack("shared", cfg.layers[:cfg.split], h, self.params)
        zk = _run_stack("kw", cfg.layers[cfg.split:], h, self.params)
        zs = _run_stack("spk", cfg.layers[cfg.split:], h, self.params)
        return zk, zs

    def copy(self):
        out = MtlModel(self.config, self.keyword_classes, self.speaker_classes,
                       {k: v.data.copy() for k, v in self.params.items()}, self.norm_mean.copy(),
                       self.norm_std.copy())
        out.meta = dict(self.meta)
        return out

    def state(self):
        out = {k: v.data for k, v in self.params.items()}
        out["norm.mean"] = self.norm_mean
        out["norm.std"] = self.norm_std
        return out

    def save(self, path, extra=None):
        cfg = {"kind": "mtl-model", "encoder": self.config.to_dict(),
               "keyword_classes": self.keyword_classes, "speaker_classes": self.speaker_classes}
        cfg.update(self.meta)
        cfg.update(extra or {})
        ad.save_checkpoint(path, self.state(), cfg)

    @classmethod
    def load(cls, path):
        arrays, cfg = ad.load_checkpoint(path)
        if cfg.get("kind") != "mtl-model":
            raise ValueError(f"{path}: not an MtlModel checkpoint")
        mean, std = arrays.pop("norm.mean"), arrays.pop("norm.std")
        model = cls(EncoderConfig(**cfg["encoder"]), cfg["keyword_classes"], cfg["speaker_classes"], arrays, mean, std)
        model.meta = {k: v for k, v in cfg.items()
                      if k not in ("kind", "encoder", "keyword_classes", "speaker_classes")}
        return model


def _as_batch(x):
    x = getattr(x, "frames", x)
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def embed(model, x):
    """(keyword, speaker) embeddings of one feature matrix as numpy vectors."""
    zk, zs = model.forward(_as_batch(x))
    return zk.data[0], zs.data[0]


def embed_batch(model, features, batch_size=256):
    zk, zs = [], []
    for i in range(0, len(features), batch_size):
        a, b = model.forward(features[i:i + batch_size])
        zk.append(a.data)
        zs.append(b.data)
    d = model.config.embed_dim
    if not zk:
        return np.zeros((0, d)), np.zeros((0, d))
    return np.concatenate(zk), np.concatenate(zs)


def mtl_loss(model, x, keyword_targets, speaker_targets, lam=0.1):
    """``L_k + lam * L_s`` on a batch.

    Rows whose speaker target is negative (no speaker, e.g. silence) are left
    out of the speaker term.

    Returns:
        (total, keyword_loss, speaker_loss) tensors.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    zk, zs = model.forward(x)
    lk = classification_loss(model.keyword_classifier, zk, keyword_targets)
    spk = np.asarray(speaker_targets, dtype=np.int64)
    has = (spk >= 0).astype(np.float64)
    ls = classification_loss(model.speaker_classifier, zs, np.where(spk >= 0, spk, 0), weights=has)
    return ad.add(lk, ad.mul(ls, lam)), lk, ls


def normalize_rows(z):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm embedding")
    return z / n


def keyword_index(model, target):
    if isinstance(target, str):
        if target in (UNKNOWN, SILENCE):
            raise ValueError(f"{target!r} cannot be a target keyword")
        try:
            return model.keyword_classes.index(target)
        except ValueError:
            raise ValueError(f"unknown keyword {target!r}") from None
    target = int(target)
    if model.keyword_classes[target] in (UNKNOWN, SILENCE):
        raise ValueError(f"{model.keyword_classes[target]!r} cannot be a target keyword")
    return target


def keyword_prototype(model, target):
    """Unit-norm classifier column of a target keyword."""
    w = model.params["clf_kw.weight"].data[:, keyword_index(model, target)]
    return w / np.linalg.norm(w)


def keyword_score_from_embedding(model, zk, target):
    return (normalize_rows(zk) @ keyword_prototype(model, target)).clip(-1, 1)


def keyword_score(model, x, target):
    """Cosine between the keyword embedding of ``x`` and the target's classifier column."""
    zk, _ = embed(model, x)
    return float(keyword_score_from_embedding(model, zk, target)[0])


def enrollment_embedding(speaker_embeddings):
    """Re-normalised mean of unit-normalised reference speaker embeddings."""
    m = normalize_rows(speaker_embeddings).mean(axis=0)
    return m / np.linalg.norm(m)


def speaker_score(model, x, x_ref):
    """Cosine between the speaker embedding of ``x`` and the enrolment.

    ``x_ref`` is one feature matrix or a list of them (multi-clip enrolment).
    """
    _, zs = embed(model, x)
    refs = x_ref if isinstance(x_ref, (list, tuple)) else [x_ref]
    ref = enrollment_embedding(np.stack([embed(model, r)[1] for r in refs]))
    return float(np.clip(normalize_rows(zs)[0] @ ref, -1.0, 1.0))


# ---------------------------------------------------------------- training

class TrainingDiverged(FloatingPointError):
    def __init__(self, message, last_good):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class ValidationSet:
    features: np.ndarray
    keyword: np.ndarray  # class indices
    sv_a: np.ndarray = None  # index pairs for speaker verification
    sv_b: np.ndarray = None
    sv_same: np.ndarray = None


def build_validation(utterances, features, keyword_classes, n_sv_pairs=2000, seed=0):
    kw = np.array([keyword_classes.index(u.keyword) for u in utterances])
    val = ValidationSet(features, kw)
    speakers = {u.speaker for u in utterances if u.speaker != NO_SPEAKER}
    if len(speakers) >= 2:
        pos = {u.id: i for i, u in enumerate(utterances)}
        split = make_sv_splits(utterances, 1, n_sv_pairs, seed)[0]
        val.sv_a = np.array([pos[p.anchor] for p in split.pairs])
        val.sv_b = np.array([pos[p.test] for p in split.pairs])
        val.sv_same = np.array([p.category == "same-speaker" for p in split.pairs])
    return val


def validate(model, val):
    zk, zs = embed_batch(model, val.features)
    probs = classify(model.keyword_classifier, zk)
    acc = float(np.mean(probs.argmax(axis=1) == val.keyword))
    out = {"keyword_accuracy": acc}
    if val.sv_a is not None:
        zn = normalize_rows(zs)
        s = np.sum(zn[val.sv_a] * zn[val.sv_b], axis=1)
        out["speaker_eer"] = eer(ScoreSet(s[val.sv_same], s[~val.sv_same]))[0]
    return out


@dataclass
class TrainResult:
    model: MtlModel
    history: list
    best_epoch: int


def train_mtl(model, features, keyword_targets, speaker_targets, epochs=30, seed=0, lam=0.1,
              batch_size=64, lr=1e-3, validation=None, freeze=()):
    """Minimise ``L_k + lam * L_s`` with Adam.

    Args:
        features: (N, T, D) training features.
        keyword_targets / speaker_targets: class indices (speaker < 0: none).
        validation: optional :class:`ValidationSet`; the epoch with the best
            ``(1 - keyword accuracy) + speaker EER`` (EER only when ``lam > 0``)
            is retained.
        freeze: parameter-name prefixes that receive no update.

    Raises:
        TrainingDiverged: on a non-finite loss, carrying the last good model.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not model.norm_fitted:
        model.fit_normalization(features)
    kw_t = np.asarray(keyword_targets)
    spk_t = np.asarray(speaker_targets)
    trainable = {k: v for k, v in model.params.items() if not (freeze and k.startswith(tuple(freeze)))}
    opt = ad.Adam(lr=lr)
    history = []
    best, best_score, best_epoch = model.copy(), np.inf, 0
    for epoch in range(epochs):
        losses = []
        for b in mtl_batches(len(features), min(batch_size, len(features)), seed, epoch):
            ad.zero_grad(model.params)
            total, lk, ls = mtl_loss(model, features[b], kw_t[b], spk_t[b], lam)
            if not np.isfinite(total.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", best)
            grads = ad.backward(total, trainable)
            opt.step(trainable, grads)
            losses.append((float(total.data), float(lk.data), float(ls.data)))
        rec = {"epoch": epoch + 1, "loss": float(np.mean([l[0] for l in losses])),
               "keyword_loss": float(np.mean([l[1] for l in losses])),
               "speaker_loss": float(np.mean([l[2] for l in losses]))}
        if validation is not None:
            rec.update(validate(model, validation))
            score = 1.0 - rec["keyword_accuracy"]
            if lam > 0 and "speaker_eer" in rec:
                score += rec["speaker_eer"]
            if score < best_score:
                best, best_score, best_epoch = model.copy(), score, epoch + 1
        else:
            best, best_epoch = model.copy(), epoch + 1
        logger.info("mtl epoch %d: %s", epoch + 1, rec)
        history.append(rec)
    return TrainResult(best, history, best_epoch)


def label_indices(utterances, keyword_classes, speaker_classes):
    spk_pos = {s: i for i, s in enumerate(speaker_classes)}
    kw = np.array([keyword_classes.index(u.keyword) for u in utterances])
    spk = np.array([spk_pos.get(u.speaker, -1) for u in utterances])
    return kw, spk


"""Task-specific scoring: linear score combination (SCM) and the trainable
task representation module (TRM), plus the per-task scoring dispatch."""

from dataclasses import dataclass, asdict
import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import TrmBatchSampler, check_trm_batch, task_partition
from .metrics import ScoreSet, eer, frr_at_far
from .model import (
    BIAS_INIT, SCALE_INIT, TrainingDiverged, embed, embed_batch, enrollment_embedding, keyword_index, normalize_rows,
)

logger = logging.getLogger(__name__)

TASKS = ("C", "TB", "TO")
MECHANISMS = ("keyword-only", "scm", "trm")


# ---------------------------------------------------------------- SCM

@dataclass
class ScmParams:
    alpha: float
    target_far: float = float("nan")
    provenance: str = "manual"  # manual | grid-search
    grid_step: float = float("nan")
    task: str = ""
    validation_split: str = ""

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    def to_text(self):
        return "".join(f"{k} {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text):
        fields = dict(line.split(" ", 1) for line in text.strip().splitlines())
        return cls(float(fields["alpha"]), float(fields["target_far"]), fields["provenance"],
                   float(fields["grid_step"]), fields["task"], fields["validation_split"].strip())


def scm_combine(psi_k, psi_s, alpha):
    """``alpha * psi_k + (1 - alpha) * psi_s``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * np.asarray(psi_k) + (1.0 - alpha) * np.asarray(psi_s)


def scm_grid(step=0.01):
    n = int(round(1.0 / step))
    return np.round(np.linspace(0.0, 1.0, n + 1), 12)


def scm_grid_search(psi_k, psi_s, positive, target_far, step=0.01, task="", validation_split=""):
    """Pick the grid ``alpha`` minimising FRR at FAR <= ``target_far``.

    Ties go to the larger ``alpha``.

    Args:
        psi_k, psi_s: keyword and speaker scores of validation trials.
        positive: boolean mask of positive trials for the task.
    """
    psi_k, psi_s = np.asarray(psi_k, float), np.asarray(psi_s, float)
    positive = np.asarray(positive, bool)
    if positive.all():
        raise ValueError("grid search needs negative trials")
    if not positive.any():
        raise ValueError("grid search needs positive trials")
    best_alpha, best_frr = None, np.inf
    for alpha in scm_grid(step)[::-1]:
        s = scm_combine(psi_k, psi_s, alpha)
        frr, _ = frr_at_far(ScoreSet(s[positive], s[~positive]), target_far)
        if frr < best_frr:
            best_alpha, best_frr = float(alpha), frr
    return ScmParams(best_alpha, target_far, "grid-search", step, task, validation_split)


def tune_scm(system, table, split, task, target_far=0.01, step=0.01):
    """Grid-search ``alpha`` for ``task`` on a validation pair split."""
    pos, neg = task_partition(split, task)
    pairs = pos + neg
    a = table.rows([p.anchor for p in pairs])
    t = table.rows([p.test for p in pairs])
    psi_k, psi_s = system.component_scores(table.zk[t], table.zs[t], table.keyword[a], table.zs[a])
    positive = np.arange(len(pairs)) < len(pos)
    return scm_grid_search(psi_k, psi_s, positive, target_far, step, task, f"{split.task}:{split.split_id}")


# ---------------------------------------------------------------- TRM

class TrmModule:
    """Squeeze-and-excitation style gate over ``[norm(z_k), norm(z_s)]``.

    ``gate="per-dim"`` excites back to ``2d`` sigmoid gates; ``"per-embedding"``
    excites to two gates, one broadcast over each half.
    """

    def __init__(self, task, embed_dim, reduction=2, gate="per-dim", params=None, seed=0):
        if task not in ("TB", "TO"):
            raise ValueError(f"TRM task must be TB or TO, got {task!r}")
        if gate not in ("per-dim", "per-embedding"):
            raise ValueError(f"unknown gate kind {gate!r}")
        self.task, self.embed_dim, self.reduction, self.gate = task, embed_dim, reduction, gate
        two_d = 2 * embed_dim
        n_gate = two_d if gate == "per-dim" else 2
        if params is None:
            rng = np.random.default_rng([seed, 0x7A])
            params = {
                "squeeze.weight": rng.standard_normal((two_d, reduction)),
                "squeeze.bias": np.zeros(reduction),
                "excite.weight": np.zeros((reduction, n_gate)),
                "excite.bias": np.zeros(n_gate),
                "loss.scale": np.array(SCALE_INIT),
                "loss.bias": np.array(BIAS_INIT),
            }
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True, name=k)
                       for k, v in params.items()}
        self._expand = np.kron(np.eye(2), np.ones((1, embed_dim)))  # (2, 2d)

    @property
    def out_dim(self):
        return 2 * self.embed_dim

    def copy(self):
        return TrmModule(self.task, self.embed_dim, self.reduction, self.gate,
                         {k: v.data.copy() for k, v in self.params.items()})

    def gates(self, u):
        p = self.params
        h = ad.relu(ad.affine(u, p["squeeze.weight"], p["squeeze.bias"]))
        a = ad.sigmoid(ad.affine(h, p["excite.weight"], p["excite.bias"]))
        if self.gate == "per-embedding":
            a = ad.matmul(a, Tensor(self._expand))
        return a

    def save(self, path):
        ad.save_checkpoint(path, {k: v.data for k, v in self.params.items()},
                           {"kind": "trm", "task": self.task, "embed_dim": self.embed_dim,
                            "reduction": self.reduction, "gate": self.gate})

    @classmethod
    def load(cls, path):
        arrays, cfg = ad.load_checkpoint(path)
        if cfg.get("kind") != "trm":
            raise ValueError(f"{path}: not a TRM checkpoint")
        return cls(cfg["task"], cfg["embed_dim"], cfg["reduction"], cfg["gate"], arrays)


def _rows(z):
    z = ad.as_tensor(z)
    return ad.take(z, (None, slice(None))) if z.ndim == 1 else z


def trm_forward(m, zk, zs):
    """Gated task embedding ``u * gate(u)`` with ``u = [norm(zk), norm(zs)]``."""
    zk, zs = _rows(zk), _rows(zs)
    for name, z in (("keyword", zk), ("speaker", zs)):
        if np.any(np.linalg.norm(z.data, axis=-1) == 0):
            raise ValueError(f"zero {name} embedding")
    u = ad.concat([ad.l2_normalize(zk), ad.l2_normalize(zs)], axis=-1)
    return ad.mul(u, m.gates(u))


def trm_score(m, query, prototype):
    """Row-wise cosine between TRM outputs of queries and prototypes."""
    q = trm_forward(m, *query).data
    p = trm_forward(m, *prototype).data
    s = np.sum(normalize_rows(q) * normalize_rows(p), axis=-1)
    return np.clip(s, -1.0, 1.0)


def trm_loss(m, zk, zs, pk, ps, keywords=None, speakers=None):
    """Angular prototypical loss: cross-entropy of ``scale * cos + bias`` with
    the diagonal (query i vs its own prototype i) as the target.

    If keyword/speaker identities of the rows are given, the batch is checked
    against the module's task rule first.
    """
    if keywords is not None:
        check_trm_batch(m.task, keywords, speakers)
    q = trm_forward(m, zk, zs)
    p = trm_forward(m, pk, ps)
    sim = ad.cosine_matrix(q, p)
    logits = ad.scale_shift(sim, m.params["loss.scale"], m.params["loss.bias"])
    return ad.cross_entropy(logits, np.arange(q.shape[0]))


@dataclass
class TrmTrainResult:
    module: TrmModule
    history: list
    best_epoch: int


def train_trm(m, model, train_utts, train_features, epochs=50, seed=0, batch_n=None, lr=1e-2,
              group_fraction=0.5, validation=None, embeddings=None):
    """Train a TRM on top of a frozen multi-task model.

    Queries are training utterances; prototypes are the frozen classifier
    columns of their keyword and speaker.  The multi-task model is only read
    (its embeddings are computed once, outside any graph).

    Args:
        validation: optional callable ``module -> task EER``; the best epoch is kept.
        embeddings: optional precomputed ``(zk, zs)`` for ``train_utts``.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    zk_all, zs_all = embeddings if embeddings is not None else embed_batch(model, train_features)
    wk = model.params["clf_kw.weight"].data
    ws = model.params["clf_spk.weight"].data
    kw_pos = {k: i for i, k in enumerate(model.keyword_classes)}
    spk_pos = {s: i for i, s in enumerate(model.speaker_classes)}
    n_cmd = len([k for k in model.keyword_classes if k not in ("Unknown", "Silence")])
    if batch_n is None:
        batch_n = n_cmd
    sampler = TrmBatchSampler(train_utts, m.task, batch_n, seed, group_fraction)
    opt = ad.Adam(lr=lr)
    history = []
    best, best_score, best_epoch = m.copy(), np.inf, 0
    if validation is not None:  # the untrained module (0.5 gates) is a candidate too
        best_score = float(validation(m))
        history.append({"epoch": 0, "validation_eer": best_score})
    for epoch in range(epochs):
        losses = []
        for _ in range(sampler.batches_per_epoch()):
            b = sampler.sample()
            pk = wk[:, [kw_pos[k] for k in b.keyword]].T
            ps = ws[:, [spk_pos[s] for s in b.speaker]].T
            ad.zero_grad(m.params)
            loss = trm_loss(m, zk_all[b.utt], zs_all[b.utt], pk, ps, b.keyword, b.speaker)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"TRM loss non-finite at epoch {epoch}", best)
            grads = ad.backward(loss, m.params)
            opt.step(m.params, grads)
            losses.append(float(loss.data))
        rec = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
        if validation is not None:
            rec["validation_eer"] = float(validation(m))
            if rec["validation_eer"] < best_score:
                best, best_score, best_epoch = m.copy(), rec["validation_eer"], epoch + 1
        else:
            best, best_epoch = m.copy(), epoch + 1
        logger.info("trm-%s epoch %d: %s", m.task, epoch + 1, rec)
        history.append(rec)
    return TrmTrainResult(best, history, best_epoch)


# ---------------------------------------------------------------- scoring system

class EmbeddingTable:
    """Unit-normalised keyword/speaker embeddings indexed by utterance id."""

    def __init__(self, utterances, zk, zs):
        self.utts = list(utterances)
        self.pos = {u.id: i for i, u in enumerate(self.utts)}
        self.zk = normalize_rows(zk)
        self.zs = normalize_rows(zs)
        self.keyword = np.array([u.keyword for u in self.utts])
        self.speaker = np.array([u.speaker for u in self.utts])

    @classmethod
    def build(cls, model, utterances, features):
        zk, zs = embed_batch(model, features)
        return cls(utterances, zk, zs)

    def rows(self, ids):
        return np.array([self.pos[i] for i in ids], dtype=np.int64)


class PkMtlSystem:
    """A trained multi-task model plus its task adapters."""

    def __init__(self, model, scm=None, trm=None):
        self.model = model
        self.scm = dict(scm or {})
        self.trm = dict(trm or {})
        self._protos = normalize_rows(model.params["clf_kw.weight"].data.T)

    def prototypes(self, targets):
        return self._protos[[keyword_index(self.model, t) for t in targets]]

    def score_embeddings(self, zk, zs, targets, ref_zs, task, mechanism, alpha=None):
        """Vectorised scoring of test embeddings against targets/enrolments.

        Args:
            zk, zs: (n, d) test embeddings.
            targets: n target keyword names.
            ref_zs: (n, d) enrolment speaker embeddings (ignored for C).
        """
        _check_combo(task, mechanism)
        protos = self.prototypes(targets)
        psi_k = np.sum(normalize_rows(zk) * protos, axis=1)
        if mechanism == "keyword-only":
            return np.clip(psi_k, -1, 1)
        if ref_zs is None:
            raise ValueError(f"task {task} needs an enrolment")
        psi_s = np.sum(normalize_rows(zs) * normalize_rows(ref_zs), axis=1)
        if mechanism == "scm":
            if alpha is None:
                if task not in self.scm:
                    raise KeyError(f"no SCM parameters for task {task}")
                alpha = self.scm[task].alpha
            return scm_combine(np.clip(psi_k, -1, 1), np.clip(psi_s, -1, 1), alpha)
        if task not in self.trm:
            raise KeyError(f"no TRM for task {task}")
        return trm_score(self.trm[task], (zk, zs), (protos, ref_zs))

    def component_scores(self, zk, zs, targets, ref_zs):
        protos = self.prototypes(targets)
        psi_k = np.sum(normalize_rows(zk) * protos, axis=1)
        psi_s = np.sum(normalize_rows(zs) * normalize_rows(ref_zs), axis=1)
        return np.clip(psi_k, -1, 1), np.clip(psi_s, -1, 1)

    def score_pairs(self, table, pairs, task, mechanism, alpha=None, enrollments=None):
        """Scores of evaluation pairs; the anchor fixes target keyword and
        (unless ``enrollments`` maps speaker -> embedding) the enrolment."""
        a = table.rows([p.anchor for p in pairs])
        t = table.rows([p.test for p in pairs])
        targets = table.keyword[a]
        if enrollments is None:
            ref = table.zs[a]
        else:
            ref = np.stack([enrollments[s] for s in table.speaker[a]])
        return self.score_embeddings(table.zk[t], table.zs[t], targets, ref, task, mechanism, alpha)


def _check_combo(task, mechanism):
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mechanism!r}")
    if task == "C" and mechanism != "keyword-only":
        raise ValueError("C-KWS is always scored keyword-only")


def task_score(system, x, x_ref, target, task, mechanism="keyword-only"):
    """Score one test feature matrix for ``target`` under ``task``.

    ``x_ref`` is the enrolment (feature matrix or list of them); it is ignored
    for C-KWS and required otherwise.
    """
    _check_combo(task, mechanism)
    zk, zs = embed(system.model, x)
    ref = None
    if task != "C":
        if x_ref is None or (isinstance(x_ref, (list, tuple)) and not x_ref):
            raise ValueError(f"task {task} needs an enrolment utterance")
        refs = x_ref if isinstance(x_ref, (list, tuple)) else [x_ref]
        ref = enrollment_embedding(np.stack([embed(system.model, r)[1] for r in refs]))[None]
    return float(system.score_embeddings(zk[None], zs[None], [target], ref, task, mechanism)[0])


def validation_eer_fn(system, table, split, task):
    """Closure giving a candidate TRM's task EER on a validation pair split."""
    pos_pairs, neg_pairs = task_partition(split, task)

    def fn(m):
        saved = system.trm.get(task)
        system.trm[task] = m
        try:
            sp = system.score_pairs(table, pos_pairs, task, "trm")
            sn = system.score_pairs(table, neg_pairs, task, "trm")
        finally:
            if saved is None:
                system.trm.pop(task, None)
            else:
                system.trm[task] = saved
        return eer(ScoreSet(sp, sn))[0]

    return fn

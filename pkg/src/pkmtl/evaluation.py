"""Per-task evaluation over pair splits and the streaming general-negative protocol."""

from dataclasses import dataclass

import numpy as np

from .dataset import task_partition
from .metrics import (
    FRR_TARGETS, DecisionThreshold, ScoreSet, aggregate, apply_threshold, format_record, metric_report,
)
from .model import classify, normalize_rows

# display names for table rows
MECHANISM_ROWS = [
    ("keyword-only", "keyword-only", None),
    ("SCM-M", "scm", 0.5),
    ("SCM-GS", "scm", None),
    ("TRM", "trm", None),
]


@dataclass
class TaskEvaluation:
    task: str
    mechanism: str
    per_split: list
    summary: dict  # metric -> (mean, std)


def score_set(system, table, split, task, mechanism, alpha=None, enrollments=None):
    if task == "SV":
        pos, neg = task_partition(split, "SV")
        return ScoreSet(_speaker_scores(table, pos), _speaker_scores(table, neg), "SV", "speaker")
    pos, neg = task_partition(split, task)
    sp = system.score_pairs(table, pos, task, mechanism, alpha, enrollments)
    sn = system.score_pairs(table, neg, task, mechanism, alpha, enrollments)
    return ScoreSet(sp, sn, task, mechanism)


def _speaker_scores(table, pairs):
    a = table.rows([p.anchor for p in pairs])
    b = table.rows([p.test for p in pairs])
    return np.sum(table.zs[a] * table.zs[b], axis=1)


def evaluate_task(system, table, splits, task, mechanism="keyword-only", alpha=None, enrollments=None):
    """Metrics per split and their mean (std) across splits.

    Task definitions: C positives are ts-tk and nts-tk; TB positives are ts-tk
    against ts-ntk and nts-ntk (nts-tk unused); TO positives are ts-tk against
    all other categories; SV uses same/different-speaker pairs.
    """
    reports = [metric_report(score_set(system, table, s, task, mechanism, alpha, enrollments)) for s in splits]
    return TaskEvaluation(task, mechanism, reports, aggregate(reports))


def keyword_accuracy(system, table):
    """Top-1 keyword classification accuracy over the utterances of ``table``."""
    model = system.model
    probs = classify(model.keyword_classifier, table.zk)
    truth = np.array([model.keyword_classes.index(k) for k in table.keyword])
    return float(np.mean(probs.argmax(axis=1) == truth))


def threshold_at_frr(positive, target, source):
    """Largest observed positive score whose FRR (share of positives <= it)
    does not exceed ``target``; -inf if none does."""
    pos = np.sort(np.asarray(positive, dtype=np.float64))
    frr = np.searchsorted(pos, pos, side="right") / len(pos)
    ok = pos[frr <= target]
    delta = float(ok[-1]) if len(ok) else -np.inf
    return DecisionThreshold(delta, "frr-constrained", source, target)


def evaluate_stream(system, table, segment_embeddings, splits, task, mechanism, targets=FRR_TARGETS,
                    seed=0, alpha=None):
    """FAR on streaming negatives at thresholds fixed by target FRR on ts-tk pairs.

    For each split, the threshold comes from that split's ts-tk scores.  Every
    stream segment is then paired with every target keyword, each pairing
    enrolled by a randomly chosen test utterance of that keyword.  FAR is
    computed per keyword and macro-averaged.

    Args:
        segment_embeddings: (zk, zs) arrays of the one-second stream segments.

    Returns:
        dict with ``far@frr<t>`` -> (mean, std) over splits, ``per_keyword``
        (t -> keyword -> mean FAR) and ``thresholds`` (per split).
    """
    zk, zs = segment_embeddings
    if len(zk) == 0:
        raise ValueError("empty stream")
    zk, zs = normalize_rows(zk), normalize_rows(zs)
    kw_targets = [k for k in system.model.keyword_classes if k not in ("Unknown", "Silence")]
    by_kw = {k: np.flatnonzero(table.keyword == k) for k in kw_targets}
    per_split = {t: [] for t in targets}
    per_keyword = {t: {k: [] for k in kw_targets} for t in targets}
    thresholds = []
    for split in splits:
        pos_pairs = [p for p in split.pairs if p.category == "ts-tk"]
        pos = system.score_pairs(table, pos_pairs, task, mechanism, alpha)
        rng = np.random.default_rng([seed, 0x5E, split.split_id])
        neg_scores = {}
        for k in kw_targets:
            if len(by_kw[k]) == 0:
                raise ValueError(f"no enrolment utterance for keyword {k!r}")
            enroll = rng.choice(by_kw[k], size=len(zk))
            neg_scores[k] = system.score_embeddings(zk, zs, [k] * len(zk), table.zs[enroll], task, mechanism, alpha)
        for t in targets:
            th = threshold_at_frr(pos, t, f"pairs:{split.split_id}")
            thresholds.append(th)
            fars = []
            for k in kw_targets:
                far = float(np.mean(apply_threshold(th, neg_scores[k], "stream")))
                per_keyword[t][k].append(far)
                fars.append(far)
            per_split[t].append(float(np.mean(fars)))
    out = {f"far@frr{t:g}": (float(np.mean(v)), float(np.std(v))) for t, v in per_split.items()}
    out["per_keyword"] = {t: {k: float(np.mean(v)) for k, v in d.items()} for t, d in per_keyword.items()}
    out["thresholds"] = thresholds
    return out


# ---------------------------------------------------------------- reports

def table1_report(system, table, kws_splits, sv_splits, param_counts=None, enrollments=None):
    """Evaluate every mechanism row on C/TB/TO (+SV) and return report lines
    plus a nested dict ``row -> task -> metric -> (mean, std)``.

    ``enrollments`` (speaker -> embedding) replaces the anchor as enrolment.
    """
    results = {}
    sv = evaluate_task(system, table, sv_splits, "SV").summary if sv_splits else {}
    acc = keyword_accuracy(system, table)
    c = evaluate_task(system, table, kws_splits, "C").summary
    for row, mech, alpha in MECHANISM_ROWS:
        if mech == "scm" and alpha is None and not system.scm:
            continue
        if mech == "trm" and not system.trm:
            continue
        res = {"SV": sv, "C": c, "C.acc": acc}
        for task in ("TB", "TO"):
            if mech == "scm" and alpha is None and task not in system.scm:
                continue
            if mech == "trm" and task not in system.trm:
                continue
            res[task] = evaluate_task(system, table, kws_splits, task, mech, alpha, enrollments).summary
        results[row] = res
    lines = ["# table-1 report: mean/std over splits; rates are fractions"]
    for row, res in results.items():
        key = row.lower()
        lines.append(f"{key}.c.accuracy {res['C.acc']!r}")
        lines += format_record(f"{key}.sv", res["SV"])
        lines += format_record(f"{key}.c", res["C"])
        for task in ("TB", "TO"):
            if task in res:
                lines += format_record(f"{key}.{task.lower()}", res[task])
        if param_counts:
            lines.append(f"{key}.params {param_counts.get(row, param_counts.get('total', 0))!r}")
    return lines, results


def table2_report(results):
    """``results``: row name -> evaluate_stream output."""
    lines = ["# table-2 report: FAR on streaming negatives at target FRR"]
    for row, res in results.items():
        lines += format_record(row.lower(), {k: v for k, v in res.items() if k.startswith("far@")})
    return lines

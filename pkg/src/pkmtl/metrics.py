"""Detection metrics over positive/negative score sets.

A trial is accepted when its score is strictly greater than the threshold.
Candidate thresholds are -inf, every distinct observed score and +inf, which
makes every sweep below exact.
"""

from dataclasses import dataclass, field

import numpy as np

FAR_TARGETS = (0.01, 0.10)
FRR_TARGETS = (0.01, 0.05)


class ThresholdLeakage(RuntimeError):
    """A threshold was applied to the same data it was selected on."""


@dataclass
class ScoreSet:
    positive: np.ndarray
    negative: np.ndarray
    task: str = ""
    mechanism: str = ""

    def __post_init__(self):
        self.positive = np.asarray(self.positive, dtype=np.float64).ravel()
        self.negative = np.asarray(self.negative, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.positive)) and np.all(np.isfinite(self.negative))):
            raise ValueError("scores must be finite")

    def require_both(self):
        if len(self.positive) == 0 or len(self.negative) == 0:
            raise ValueError("metric needs at least one positive and one negative score")


def decide(score, threshold):
    """Accept iff ``score > threshold``."""
    return score > threshold


def candidate_thresholds(s):
    return np.concatenate([[-np.inf], np.unique(np.concatenate([s.positive, s.negative])), [np.inf]])


def rates(s, thresholds):
    """FAR and FRR at each threshold (vectorised by sorting)."""
    s.require_both()
    neg = np.sort(s.negative)
    pos = np.sort(s.positive)
    n_fa = len(neg) - np.searchsorted(neg, thresholds, side="right")
    n_miss = np.searchsorted(pos, thresholds, side="right")
    return n_fa / len(neg), n_miss / len(pos)


def far_frr_curve(s):
    """List of (threshold, FAR, FRR) over all candidate thresholds, ascending."""
    th = candidate_thresholds(s)
    far, frr = rates(s, th)
    return list(zip(th.tolist(), far.tolist(), frr.tolist()))


def eer(s):
    """Equal error rate as ``(FAR + FRR) / 2`` at the threshold minimising
    ``|FAR - FRR|`` (smallest such threshold).

    Returns:
        (eer, threshold)
    """
    th = candidate_thresholds(s)
    far, frr = rates(s, th)
    i = int(np.argmin(np.abs(far - frr)))
    return (far[i] + frr[i]) / 2.0, float(th[i])


def frr_at_far(s, target):
    """FRR at the smallest threshold whose FAR is at most ``target``."""
    if target < 0:
        raise ValueError("target FAR must be non-negative")
    th = candidate_thresholds(s)
    far, frr = rates(s, th)
    i = int(np.flatnonzero(far <= target)[0])
    return float(frr[i]), float(th[i])


def far_at_frr(s, target):
    """FAR at the largest threshold whose FRR is at most ``target``."""
    if target < 0:
        raise ValueError("target FRR must be non-negative")
    th = candidate_thresholds(s)
    far, frr = rates(s, th)
    i = int(np.flatnonzero(frr <= target)[-1])
    return float(far[i]), float(th[i])


# ---------------------------------------------------------------- thresholds

@dataclass(frozen=True)
class DecisionThreshold:
    delta: float
    rule: str  # eer-point | far-constrained | frr-constrained
    source: str  # identifier of the data the threshold was selected on
    target: float = float("nan")


def select_threshold(s, rule, source, target=None):
    if rule == "eer-point":
        _, delta = eer(s)
    elif rule == "far-constrained":
        _, delta = frr_at_far(s, target)
    elif rule == "frr-constrained":
        _, delta = far_at_frr(s, target)
    else:
        raise ValueError(f"unknown threshold rule {rule!r}")
    return DecisionThreshold(delta, rule, source, float("nan") if target is None else target)


def apply_threshold(threshold, scores, source):
    """Accept/reject ``scores`` (from data ``source``) with a held-out threshold."""
    if threshold.source == source:
        raise ThresholdLeakage(f"threshold selected on {source!r} cannot be applied to it")
    return decide(np.asarray(scores), threshold.delta)


# ---------------------------------------------------------------- reports

@dataclass
class MetricReport:
    eer: float
    frr_at_far: dict
    far_at_frr: dict
    thresholds: dict = field(default_factory=dict)
    n_positive: int = 0
    n_negative: int = 0

    def as_dict(self):
        out = {"eer": self.eer}
        out.update({f"frr@far{t:g}": v for t, v in self.frr_at_far.items()})
        out.update({f"far@frr{t:g}": v for t, v in self.far_at_frr.items()})
        return out


def metric_report(s, far_targets=FAR_TARGETS, frr_targets=FRR_TARGETS):
    e, d = eer(s)
    th = {"eer": d}
    frr_far, far_frr = {}, {}
    for t in far_targets:
        frr_far[t], th[f"far{t:g}"] = frr_at_far(s, t)
    for t in frr_targets:
        far_frr[t], th[f"frr{t:g}"] = far_at_frr(s, t)
    return MetricReport(e, frr_far, far_frr, th, len(s.positive), len(s.negative))


def aggregate(reports):
    """Mean and (population) std of every metric across reports."""
    keys = reports[0].as_dict().keys()
    table = np.array([[r.as_dict()[k] for k in keys] for r in reports])
    return {k: (float(table[:, i].mean()), float(table[:, i].std())) for i, k in enumerate(keys)}


def format_record(prefix, values):
    """One ``key value`` line per metric; values rendered with repr precision."""
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, tuple):
            lines.append(f"{prefix}.{k}.mean {v[0]!r}")
            lines.append(f"{prefix}.{k}.std {v[1]!r}")
        else:
            lines.append(f"{prefix}.{k} {v!r}")
    return lines


def parse_record(text):
    out = {}
    for line in text.splitlines():
        if line.strip() and not line.startswith("#"):
            k, v = line.split(None, 1)
            out[k] = float(v)
    return out


def write_det_curve(path, s):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# threshold\tfar\tfrr\n")
        for th, far, frr in far_frr_curve(s):
            fh.write(f"{th!r}\t{far!r}\t{frr!r}\n")


def score_histograms(scores_by_category, bins=40, lo=-1.0, hi=1.0):
    """Per-category bin counts and log10(1 + count) over shared bin edges."""
    edges = np.linspace(lo, hi, bins + 1)
    out = {}
    for cat, scores in scores_by_category.items():
        counts, _ = np.histogram(np.clip(scores, lo, hi), bins=edges)
        out[cat] = counts
    return edges, out


def write_histograms(path, scores_by_category, bins=40):
    edges, counts = score_histograms(scores_by_category, bins)
    cats = sorted(counts)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# bin_lo\tbin_hi\t" + "\t".join(f"{c}\tlog10(1+{c})" for c in cats) + "\n")
        for i in range(bins):
            cells = []
            for c in cats:
                cells += [str(int(counts[c][i])), f"{np.log10(1 + counts[c][i]):.6f}"]
            fh.write(f"{edges[i]:.4f}\t{edges[i + 1]:.4f}\t" + "\t".join(cells) + "\n")

"""Utterance manifests, corpus ingestion, evaluation pairs and batch samplers."""

from collections import defaultdict
from dataclasses import dataclass, field
import hashlib
import logging
import os
import re

import numpy as np

from . import synthetic
from .features import SAMPLE_RATE, Waveform, extract, load_features, read_wav, save_features

logger = logging.getLogger(__name__)

UNKNOWN = "Unknown"
SILENCE = "Silence"
NO_SPEAKER = ""
CATEGORIES = ("ts-tk", "nts-tk", "ts-ntk", "nts-ntk")
SV_CATEGORIES = ("same-speaker", "diff-speaker")
SPLITS = ("train", "validation", "test")


class ProtocolError(ValueError):
    """The data cannot satisfy a pair/batch construction rule."""


@dataclass(frozen=True)
class LabeledUtterance:
    id: str
    source: str
    keyword: str
    speaker: str
    split: str

    @property
    def is_command(self):
        return self.keyword not in (UNKNOWN, SILENCE)


@dataclass(frozen=True)
class EvalPair:
    anchor: str
    test: str
    category: str


@dataclass
class PairSplit:
    pairs: list
    split_id: int
    task: str  # "kws-pairs" or "sv-pairs"

    def by_category(self, category):
        return [p for p in self.pairs if p.category == category]

    def __len__(self):
        return len(self.pairs)


def pair_category(anchor, test):
    same_spk = anchor.speaker == test.speaker and anchor.speaker != NO_SPEAKER
    same_kw = anchor.keyword == test.keyword
    return ("ts-" if same_spk else "nts-") + ("tk" if same_kw else "ntk")


def keyword_classes(utterances):
    """Class list: command words (canonical order first), then Unknown, Silence."""
    present = {u.keyword for u in utterances}
    order = {w: i for i, w in enumerate(synthetic.COMMAND_WORDS)}
    commands = sorted((k for k in present if k not in (UNKNOWN, SILENCE)), key=lambda k: (order.get(k, 99), k))
    return commands + [k for k in (UNKNOWN, SILENCE) if k in present]


def speaker_classes(utterances):
    return sorted({u.speaker for u in utterances if u.speaker != NO_SPEAKER})


def check_speaker_disjoint(utterances):
    by_split = defaultdict(set)
    for u in utterances:
        if u.speaker != NO_SPEAKER:
            by_split[u.split].add(u.speaker)
    names = sorted(by_split)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            shared = by_split[a] & by_split[b]
            if shared:
                raise ProtocolError(f"speakers shared between {a} and {b}: {sorted(shared)[:5]}")


# ---------------------------------------------------------------- waveforms / features

def load_waveform(utt_or_source):
    """Materialise the audio behind an utterance source string."""
    source = getattr(utt_or_source, "source", utt_or_source)
    if source.startswith("synth:"):
        return synthetic.render_source(source)
    if source.startswith("noise:"):
        path, offset = source[len("noise:"):].rsplit(":", 1)
        w = read_wav(path)
        start = int(offset)
        return Waveform(w.samples[start:start + w.sample_rate], w.sample_rate)
    w = read_wav(source)
    n = w.sample_rate
    if len(w) < n:  # GSC clips can be short; zero-pad to one second
        w = Waveform(np.pad(w.samples, (0, n - len(w))), w.sample_rate)
    return w


def compute_features(utterances, kind="log-mel", dim=40, cache_dir=None):
    """Stack features of one-second utterances into an (n, T, D) array."""
    out = []
    for u in utterances:
        path = None
        if cache_dir is not None:
            digest = hashlib.sha1(f"{u.source}|{kind}|{dim}".encode()).hexdigest()[:20]
            path = os.path.join(cache_dir, f"{digest}.feat")
            if os.path.exists(path):
                out.append(load_features(path).frames)
                continue
        fm = extract(load_waveform(u), kind=kind, dim=dim)
        if path is not None:
            os.makedirs(cache_dir, exist_ok=True)
            save_features(path, fm)
        out.append(fm.frames)
    return np.stack(out) if out else np.zeros((0, 0, dim))


# ---------------------------------------------------------------- synthetic corpus

def generate_synthetic(cfg):
    """Enumerate the utterances of a synthetic corpus.

    Audio is rendered lazily from the ``source`` string, see :func:`load_waveform`.
    """
    split_of = synthetic.speaker_splits(cfg)
    words = [(w, synthetic.word_name(w)) for w in range(cfg.n_keywords)]
    words += [(synthetic.UNKNOWN_OFFSET + j, UNKNOWN) for j in range(cfg.n_unknown_words)]
    utts = []
    for spk in range(cfg.n_speakers):
        spk_name = f"s{cfg.seed}-{spk:03d}"
        for word, label in words:
            for inst in range(cfg.utts_per_pair):
                src = synthetic.source_string(cfg.seed, spk, word, inst, cfg.noise_level, cfg.sample_rate, cfg.duration)
                uid = f"{spk_name}_{synthetic.word_name(word)}_{inst}"
                utts.append(LabeledUtterance(uid, src, label, spk_name, split_of[spk]))
        for inst in range(cfg.silence_per_speaker):
            src = synthetic.source_string(cfg.seed, spk, synthetic.SILENCE_WORD, inst, cfg.noise_level,
                                          cfg.sample_rate, cfg.duration)
            utts.append(LabeledUtterance(f"{spk_name}_silence_{inst}", src, SILENCE, NO_SPEAKER, split_of[spk]))
    return utts


# ---------------------------------------------------------------- Google Speech Commands

_GSC_NAME = re.compile(r"^([0-9a-f]+)_nohash_(\d+)\.wav$")
MAX_NUM_WAVS_PER_CLASS = 2 ** 27 - 1


class GscIngestError(ValueError):
    def __init__(self, problems):
        self.problems = problems
        super().__init__("GSC ingest failed:\n" + "\n".join(f"  - {p}" for p in problems))


def gsc_hash_split(filename, validation_percentage=10.0, testing_percentage=10.0):
    """The dataset's published stable-hash partition rule (by speaker hash)."""
    base = os.path.basename(filename)
    hash_name = re.sub(r"_nohash_.*$", "", base)
    h = int(hashlib.sha1(hash_name.encode("utf-8")).hexdigest(), 16)
    pct = (h % (MAX_NUM_WAVS_PER_CLASS + 1)) * (100.0 / MAX_NUM_WAVS_PER_CLASS)
    if pct < validation_percentage:
        return "validation"
    if pct < validation_percentage + testing_percentage:
        return "test"
    return "train"


def ingest_gsc(root, commands=tuple(synthetic.COMMAND_WORDS), silence_per_split=None, seed=0):
    """Build a manifest from a Google Speech Commands v1 directory tree.

    Word folders other than ``commands`` become ``Unknown``.  Splits follow
    ``validation_list.txt`` / ``testing_list.txt`` when present, else the
    stable-hash rule.  If ``silence_per_split`` maps split -> count, that many
    one-second ``Silence`` clips are cut from ``_background_noise_``.

    Raises:
        GscIngestError: listing every missing folder and unparsable filename.
    """
    problems = []
    if not os.path.isdir(root):
        raise GscIngestError([f"root directory {root!r} does not exist"])
    folders = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)) and not d.startswith("_"))
    for c in commands:
        if c not in folders:
            problems.append(f"missing keyword folder {c!r}")
    lists = {}
    for split, name in (("validation", "validation_list.txt"), ("test", "testing_list.txt")):
        path = os.path.join(root, name)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        lists[line.strip()] = split
    utts = []
    for folder in folders:
        label = folder if folder in commands else UNKNOWN
        for fname in sorted(os.listdir(os.path.join(root, folder))):
            if not fname.endswith(".wav"):
                continue
            m = _GSC_NAME.match(fname)
            if m is None:
                problems.append(f"unparsable filename {folder}/{fname}")
                continue
            rel = f"{folder}/{fname}"
            split = lists.get(rel, "train") if lists else gsc_hash_split(fname)
            utts.append(LabeledUtterance(rel, os.path.join(root, rel), label, m.group(1), split))
    if problems:
        raise GscIngestError(problems)
    if silence_per_split:
        noise_dir = os.path.join(root, "_background_noise_")
        if not os.path.isdir(noise_dir):
            raise GscIngestError(["missing _background_noise_ folder (needed for Silence)"])
        utts.extend(_silence_clips(noise_dir, silence_per_split, seed))
    return utts


def _silence_clips(noise_dir, per_split, seed):
    files = sorted(f for f in os.listdir(noise_dir) if f.endswith(".wav"))
    lengths = {f: len(read_wav(os.path.join(noise_dir, f))) for f in files}
    rng = np.random.default_rng([seed, 0x51])
    out = []
    for split in SPLITS:
        for i in range(per_split.get(split, 0)):
            f = files[rng.integers(len(files))]
            offset = int(rng.integers(0, max(1, lengths[f] - SAMPLE_RATE)))
            src = f"noise:{os.path.join(noise_dir, f)}:{offset}"
            out.append(LabeledUtterance(f"_silence_/{split}_{i}", src, SILENCE, NO_SPEAKER, split))
    return out


def summarize(utterances):
    counts = defaultdict(int)
    for u in utterances:
        counts[(u.split, "silence" if u.keyword == SILENCE else "speech")] += 1
    return {
        "utterances": sum(v for (s, kind), v in counts.items() if kind == "speech"),
        "silence": sum(v for (s, kind), v in counts.items() if kind == "silence"),
        **{f"{s}": counts[(s, "speech")] for s in SPLITS},
    }


# ---------------------------------------------------------------- manifests

MANIFEST_HEADER = "# id\tsource\tkeyword\tspeaker\tsplit"


def write_manifest(path, utterances):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for u in utterances:
            fh.write(f"{u.id}\t{u.source}\t{u.keyword}\t{u.speaker}\t{u.split}\n")


def read_manifest(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5 or parts[4] not in SPLITS:
                raise ValueError(f"{path}:{n}: malformed manifest record")
            out.append(LabeledUtterance(*parts))
    return out


def write_pairs(path, splits):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# anchor\ttest\tcategory\tsplit\ttask\n")
        for s in splits:
            for p in s.pairs:
                fh.write(f"{p.anchor}\t{p.test}\t{p.category}\t{s.split_id}\t{s.task}\n")


def read_pairs(path):
    splits = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{n}: malformed pair record")
            anchor, test, cat, sid, task = parts
            key = (task, int(sid))
            if key not in splits:
                splits[key] = PairSplit([], int(sid), task)
            splits[key].pairs.append(EvalPair(anchor, test, cat))
    return [splits[k] for k in sorted(splits)]


# ---------------------------------------------------------------- pair protocols

class _Index:
    def __init__(self, utterances):
        self.utts = list(utterances)
        self.by_spk_kw = defaultdict(list)
        self.by_kw = defaultdict(list)
        self.by_spk = defaultdict(list)
        for i, u in enumerate(self.utts):
            self.by_spk_kw[(u.speaker, u.keyword)].append(i)
            self.by_kw[u.keyword].append(i)
            self.by_spk[u.speaker].append(i)
        self.speakers = sorted(s for s in self.by_spk if s != NO_SPEAKER)
        self.all = np.arange(len(self.utts))


def _pick(rng, candidates):
    return candidates[int(rng.integers(len(candidates)))]


def _category_pools(idx, a):
    """Index arrays of test candidates in each category for anchor ``a``."""
    u = idx.utts[a]
    ts_tk = [i for i in idx.by_spk_kw[(u.speaker, u.keyword)] if i != a]
    same_kw = idx.by_kw[u.keyword]
    nts_tk = [i for i in same_kw if idx.utts[i].speaker != u.speaker]
    same_spk = idx.by_spk[u.speaker]
    ts_ntk = [i for i in same_spk if idx.utts[i].keyword != u.keyword]
    return {"ts-tk": ts_tk, "nts-tk": nts_tk, "ts-ntk": ts_ntk, "nts-ntk": None}


def make_pair_splits(data, n_splits=10, pairs_per_split=16000, seed=0):
    """Anchor-based four-category pair splits.

    Each anchor (a command-word utterance) contributes one test utterance of
    each category, so a split holds ``pairs_per_split // 4`` anchors.

    Raises:
        ProtocolError: naming the category that no anchor can realise.
    """
    if pairs_per_split % 4:
        raise ProtocolError("pairs_per_split must be a multiple of 4")
    idx = _Index(data)
    if len(idx.speakers) < 2 or len({u.keyword for u in idx.utts}) < 2:
        raise ProtocolError("need at least 2 speakers and 2 keywords")
    eligible, pools = [], {}
    missing = {c: True for c in CATEGORIES}
    for a, u in enumerate(idx.utts):
        if not u.is_command or u.speaker == NO_SPEAKER:
            continue
        p = _category_pools(idx, a)
        n_nts_ntk = (len(idx.utts) - len(idx.by_kw[u.keyword]) - len(idx.by_spk[u.speaker])
                     + len(idx.by_spk_kw[(u.speaker, u.keyword)]))
        ok = {"ts-tk": bool(p["ts-tk"]), "nts-tk": bool(p["nts-tk"]), "ts-ntk": bool(p["ts-ntk"]),
              "nts-ntk": n_nts_ntk > 0}
        for c, good in ok.items():
            if good:
                missing[c] = False
        if all(ok.values()):
            eligible.append(a)
            pools[a] = p
    if not eligible:
        lacking = [c for c, m in missing.items() if m] or ["(no anchor realises all four together)"]
        raise ProtocolError(f"cannot realise category: {', '.join(lacking)}")
    kw_arr = np.array([u.keyword for u in idx.utts])
    spk_arr = np.array([u.speaker for u in idx.utts])
    n_anchor = pairs_per_split // 4
    splits = []
    for sid in range(n_splits):
        rng = np.random.default_rng([seed, 0xA1, sid])
        pairs = []
        for a in rng.choice(eligible, size=n_anchor, replace=len(eligible) < n_anchor):
            a = int(a)
            u = idx.utts[a]
            p = pools[a]
            pairs.append(EvalPair(u.id, idx.utts[_pick(rng, p["ts-tk"])].id, "ts-tk"))
            pairs.append(EvalPair(u.id, idx.utts[_pick(rng, p["nts-tk"])].id, "nts-tk"))
            pairs.append(EvalPair(u.id, idx.utts[_pick(rng, p["ts-ntk"])].id, "ts-ntk"))
            while True:  # rejection sampling; nts-ntk candidates are the bulk of the set
                j = int(rng.integers(len(idx.utts)))
                if kw_arr[j] != u.keyword and spk_arr[j] != u.speaker:
                    break
            pairs.append(EvalPair(u.id, idx.utts[j].id, "nts-ntk"))
        splits.append(PairSplit(pairs, sid, "kws-pairs"))
    return splits


def make_sv_splits(data, n_splits=10, pairs_per_split=160000, seed=0):
    """Balanced same-speaker / different-speaker pairs; keywords ignored."""
    if pairs_per_split % 2:
        raise ProtocolError("pairs_per_split must be even")
    idx = _Index([u for u in data if u.speaker != NO_SPEAKER])
    if len(idx.speakers) < 2:
        raise ProtocolError("speaker verification pairs need at least 2 speakers")
    with_mate = [i for i, u in enumerate(idx.utts) if len(idx.by_spk[u.speaker]) > 1]
    if not with_mate:
        raise ProtocolError("no speaker has two utterances")
    spk_arr = np.array([u.speaker for u in idx.utts])
    half = pairs_per_split // 2
    splits = []
    for sid in range(n_splits):
        rng = np.random.default_rng([seed, 0x5F, sid])
        pairs = []
        for _ in range(half):
            a = _pick(rng, with_mate)
            mates = idx.by_spk[idx.utts[a].speaker]
            while True:
                b = _pick(rng, mates)
                if b != a:
                    break
            pairs.append(EvalPair(idx.utts[a].id, idx.utts[b].id, "same-speaker"))
        for _ in range(half):
            a = int(rng.integers(len(idx.utts)))
            while True:
                b = int(rng.integers(len(idx.utts)))
                if spk_arr[b] != spk_arr[a]:
                    break
            pairs.append(EvalPair(idx.utts[a].id, idx.utts[b].id, "diff-speaker"))
        splits.append(PairSplit(pairs, sid, "sv-pairs"))
    return splits


TASK_CATEGORIES = {
    # task -> (positive categories, negative categories); TB leaves nts-tk out
    "C": (("ts-tk", "nts-tk"), ("ts-ntk", "nts-ntk")),
    "TB": (("ts-tk",), ("ts-ntk", "nts-ntk")),
    "TO": (("ts-tk",), ("nts-tk", "ts-ntk", "nts-ntk")),
    "SV": (("same-speaker",), ("diff-speaker",)),
}


def task_partition(split, task):
    """(positive pairs, negative pairs) of a split under a task's definition."""
    pos_cats, neg_cats = TASK_CATEGORIES[task]
    present = {p.category for p in split.pairs}
    missing = [c for c in pos_cats + neg_cats if c not in present]
    if missing:
        raise ProtocolError(f"split {split.split_id} lacks categories {missing} needed for {task}")
    pos = [p for p in split.pairs if p.category in pos_cats]
    neg = [p for p in split.pairs if p.category in neg_cats]
    return pos, neg


def validate_pairs(split, by_id):
    """Check category predicates and anchor rules; returns a list of violations."""
    bad = []
    for p in split.pairs:
        a, t = by_id[p.anchor], by_id[p.test]
        if split.task == "kws-pairs":
            if not a.is_command:
                bad.append(f"anchor {a.id} has keyword {a.keyword}")
            if pair_category(a, t) != p.category:
                bad.append(f"{p} inconsistent with labels")
        else:
            same = a.speaker == t.speaker
            if (p.category == "same-speaker") != same:
                bad.append(f"{p} inconsistent with speakers")
    return bad


# ---------------------------------------------------------------- samplers

def mtl_batches(n, batch_size, seed, epoch=0):
    """Index batches covering ``range(n)`` once, shuffled per (seed, epoch)."""
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng([seed, 0xB7, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def mtl_batch_sampler(train_data, batch_size, seed):
    """Endless stream of batches of utterances, one shuffled epoch at a time."""
    epoch = 0
    while True:
        for b in mtl_batches(len(train_data), batch_size, seed, epoch):
            yield [train_data[i] for i in b]
        epoch += 1


@dataclass
class TrmBatch:
    """Row ``i`` pairs query utterance ``utt[i]`` with prototype identity
    ``(keyword[i], speaker[i])``; the diagonal of the similarity matrix is positive."""

    utt: np.ndarray
    keyword: list
    speaker: list
    meta: dict = field(default_factory=dict)


def nts_tk_negatives(keywords, speakers):
    """Number of off-diagonal (i, j) with equal keyword and different speaker."""
    k = np.asarray(keywords)
    s = np.asarray(speakers)
    same_k = k[:, None] == k[None, :]
    diff_s = s[:, None] != s[None, :]
    np.fill_diagonal(same_k, False)
    return int(np.sum(same_k & diff_s))


def check_trm_batch(task, keywords, speakers):
    """Raise if a batch breaks its task's negative-selection rule."""
    n = nts_tk_negatives(keywords, speakers)
    if task == "TB" and n:
        raise ProtocolError(f"TB batch contains {n} nts-tk negatives")
    if task == "TO" and len(keywords) > 1 and n == 0:
        raise ProtocolError("TO batch contains no nts-tk negatives")


class TrmBatchSampler:
    """Query/prototype batches mimicking each task's test-time negatives.

    Rows come in groups that share one factor, sized so that roughly
    ``group_fraction`` of each row's off-diagonal pairs fall inside its group.

    TB: same-speaker groups; every row has a distinct keyword, so in-group
    negatives are ts-ntk and no off-diagonal pair is nts-tk.
    TO: same-keyword groups of distinct speakers, so in-group negatives are
    nts-tk.
    """

    def __init__(self, train_data, task, n, seed, group_fraction=0.5):
        if task not in ("TB", "TO"):
            raise ValueError(f"task must be TB or TO, got {task!r}")
        if n < 2:
            raise ValueError("batch size N must be >= 2")
        if not 0.0 <= group_fraction <= 1.0:
            raise ValueError("group_fraction must lie in [0, 1]")
        self.task, self.n, self.seed = task, n, seed
        self.frac = group_fraction
        self.data = list(train_data)
        self.groups = defaultdict(list)
        for i, u in enumerate(self.data):
            if u.is_command and u.speaker != NO_SPEAKER:
                self.groups[(u.keyword, u.speaker)].append(i)
        self.keywords = sorted({k for k, _ in self.groups})
        self.speakers = sorted({s for _, s in self.groups})
        self.spk_of = defaultdict(list)
        self.kw_of = defaultdict(list)
        for k, s in sorted(self.groups):
            self.spk_of[k].append(s)
            self.kw_of[s].append(k)
        self.group_size = max(1, 1 + int(round(self.frac * (n - 1))))
        if task == "TB":
            if n > len(self.keywords):
                raise ProtocolError(f"TB batch of {n} needs {n} keywords, have {len(self.keywords)}")
            self.group_size = min(self.group_size, max((len(v) for v in self.kw_of.values()), default=0))
            if self.group_size < 1:
                raise ProtocolError("no speaker with command words for TB batches")
        else:
            if self.group_size < 2:
                raise ProtocolError("TO group fraction too small for any nts-tk negative")
            n_groups = -(-n // self.group_size)
            eligible = [k for k in self.keywords if len(self.spk_of[k]) >= self.group_size]
            if len(eligible) < n_groups:
                raise ProtocolError("not enough keywords with enough speakers for TO batches")
        self._rng = np.random.default_rng([seed, 0x7B, {"TB": 1, "TO": 2}[task]])

    def __iter__(self):
        return self

    def __next__(self):
        return self.sample()

    def batches_per_epoch(self):
        return max(1, sum(len(v) for v in self.groups.values()) // self.n)

    def _sizes(self):
        sizes = [self.group_size] * (self.n // self.group_size)
        if self.n % self.group_size:
            sizes.append(self.n % self.group_size)
        return sizes

    def sample(self):
        rng = self._rng
        rows = []
        if self.task == "TB":
            free = set(self.keywords)
            for size in self._sizes():
                # a speaker still offering `size` unused keywords (fall back to fewer)
                while True:
                    cands = [s for s in self.speakers if len(free.intersection(self.kw_of[s])) >= size]
                    if cands:
                        break
                    size -= 1
                spk = _pick(rng, cands)
                for k in rng.choice(sorted(free.intersection(self.kw_of[spk])), size=size, replace=False):
                    rows.append((str(k), spk))
                    free.discard(str(k))
            while len(rows) < self.n:  # top up with singletons if a fallback shrank a group
                k = _pick(rng, sorted(free))
                rows.append((k, _pick(rng, self.spk_of[k])))
                free.discard(k)
        else:
            pool = [k for k in self.keywords if len(self.spk_of[k]) >= self.group_size]
            sizes = self._sizes()
            for k, size in zip(rng.choice(pool, size=len(sizes), replace=False), sizes):
                for s in rng.choice(self.spk_of[k], size=size, replace=False):
                    rows.append((str(k), str(s)))
        utt = np.array([_pick(rng, self.groups[(k, s)]) for k, s in rows])
        kws = [k for k, _ in rows]
        spks = [s for _, s in rows]
        check_trm_batch(self.task, kws, spks)
        return TrmBatch(utt, kws, spks)


def trm_batch_sampler(train_data, task, n, seed, group_fraction=0.5):
    return TrmBatchSampler(train_data, task, n, seed, group_fraction)

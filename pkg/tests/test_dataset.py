import os
from collections import Counter

import numpy as np
import pytest

from pkmtl import dataset as D, features, synthetic
from pkmtl.dataset import ProtocolError


# ---------------------------------------------------------------- synthetic corpus

def test_synthetic_count(small_corpus):
    assert len(small_corpus) == 8 * 5 * 10


def test_synthetic_deterministic(small_cfg):
    a, b = D.generate_synthetic(small_cfg), D.generate_synthetic(small_cfg)
    assert a == b
    for u in a[:3] + a[-2:]:
        assert D.load_waveform(u).samples.tobytes() == D.load_waveform(u).samples.tobytes()


def test_renditions_share_pattern_but_differ():
    w0, w1 = synthetic.render(0, 2, 1, 0), synthetic.render(0, 2, 1, 1)
    assert not np.array_equal(w0.samples, w1.samples)
    profile = lambda w: features.log_mel(w).frames.max(axis=0)
    same, diff = [], []
    for spk in range(4):
        ref = profile(synthetic.render(0, spk, 0, 0))
        same += [np.corrcoef(ref, profile(synthetic.render(0, spk, 0, i)))[0, 1] for i in (1, 2, 3)]
        diff += [np.corrcoef(ref, profile(synthetic.render(0, spk, w, 0)))[0, 1] for w in (1, 2, 3)]
    assert np.mean(same) > np.mean(diff)


def test_silence_has_no_speaker(mixed_corpus):
    sil = [u for u in mixed_corpus if u.keyword == D.SILENCE]
    assert len(sil) == 12 * 2 and all(u.speaker == D.NO_SPEAKER for u in sil)
    assert sum(u.keyword == D.UNKNOWN for u in mixed_corpus) == 12 * 2 * 3


def test_speaker_disjoint_splits(small_corpus, mixed_corpus):
    D.check_speaker_disjoint(small_corpus)
    D.check_speaker_disjoint(mixed_corpus)
    splits = {s: {u.speaker for u in small_corpus if u.split == s} for s in D.SPLITS}
    assert all(splits.values())
    bad = [D.LabeledUtterance("x", "y", "yes", next(iter(splits["train"])), "test")]
    with pytest.raises(ProtocolError):
        D.check_speaker_disjoint(small_corpus + bad)


def test_keyword_classes_order(mixed_corpus):
    assert D.keyword_classes(mixed_corpus) == ["yes", "no", "up", "down", "Unknown", "Silence"]


# ---------------------------------------------------------------- manifests and pair files

def test_manifest_roundtrip(tmp_path, mixed_corpus):
    D.write_manifest(tmp_path / "m.tsv", mixed_corpus)
    assert D.read_manifest(tmp_path / "m.tsv") == mixed_corpus


def test_manifest_malformed(tmp_path):
    (tmp_path / "m.tsv").write_text("a\tb\tyes\ts1\n")
    with pytest.raises(ValueError, match=":1:"):
        D.read_manifest(tmp_path / "m.tsv")


def test_pairs_roundtrip(tmp_path, mixed_corpus):
    test = [u for u in mixed_corpus if u.split == "test"]
    splits = D.make_pair_splits(test, 2, 40, seed=1) + D.make_sv_splits(test, 2, 10, seed=1)
    D.write_pairs(tmp_path / "p.tsv", splits)
    back = D.read_pairs(tmp_path / "p.tsv")
    key = lambda s: (s.task, s.split_id)
    assert [(key(s), s.pairs) for s in back] == sorted(((key(s), s.pairs) for s in splits), key=lambda x: x[0])


# ---------------------------------------------------------------- pair protocol

def test_pair_split_arithmetic(small_corpus):
    test = [u for u in small_corpus if u.split == "test"]
    (split,) = D.make_pair_splits(test, 1, 16, seed=0)
    assert len(split) == 16
    anchors = Counter(p.anchor for p in split.pairs)
    assert len(split.pairs) // 4 == 4
    for i in range(0, 16, 4):
        group = split.pairs[i:i + 4]
        assert len({p.anchor for p in group}) == 1
        assert sorted(p.category for p in group) == sorted(D.CATEGORIES)
    assert sum(anchors.values()) == 16


def test_pair_predicates_over_100_seeds(mixed_corpus):
    test = [u for u in mixed_corpus if u.split != "train"]
    by_id = {u.id: u for u in test}
    for seed in range(100):
        for split in D.make_pair_splits(test, 1, 80, seed=seed):
            assert D.validate_pairs(split, by_id) == []
            for p in split.pairs:
                assert by_id[p.anchor].is_command
                if p.category == "nts-tk":
                    a, t = by_id[p.anchor], by_id[p.test]
                    assert a.keyword == t.keyword and a.speaker != t.speaker


def test_pair_splits_deterministic(small_corpus):
    test = [u for u in small_corpus if u.split == "test"]
    assert D.make_pair_splits(test, 2, 40, seed=9)[1].pairs == D.make_pair_splits(test, 2, 40, seed=9)[1].pairs
    assert D.make_pair_splits(test, 1, 40, seed=9)[0].pairs != D.make_pair_splits(test, 1, 40, seed=8)[0].pairs


def test_pair_split_missing_category_named(small_corpus):
    one_speaker = [u for u in small_corpus if u.speaker == small_corpus[0].speaker]
    with pytest.raises(ProtocolError, match="2 speakers"):
        D.make_pair_splits(one_speaker, 1, 16)
    single_utts = {}
    for u in small_corpus:
        single_utts.setdefault((u.speaker, u.keyword), u)
    with pytest.raises(ProtocolError, match="ts-tk"):
        D.make_pair_splits(list(single_utts.values()), 1, 16)


def test_sv_splits(mixed_corpus):
    test = [u for u in mixed_corpus if u.split == "test"]
    by_id = {u.id: u for u in test}
    (split,) = D.make_sv_splits(test, 1, 8, seed=0)
    cats = Counter(p.category for p in split.pairs)
    assert cats == {"same-speaker": 4, "diff-speaker": 4}
    for p in D.make_sv_splits(test, 1, 400, seed=1)[0].pairs:
        same = by_id[p.anchor].speaker == by_id[p.test].speaker
        assert same == (p.category == "same-speaker")
        assert by_id[p.anchor].speaker != D.NO_SPEAKER and by_id[p.test].speaker != D.NO_SPEAKER
    with pytest.raises(ProtocolError):
        D.make_sv_splits([u for u in test if u.speaker == test[0].speaker], 1, 8)


def test_task_partitions(small_corpus):
    test = [u for u in small_corpus if u.split == "test"]
    (split,) = D.make_pair_splits(test, 1, 80, seed=0)
    cats = lambda ps: {p.category for p in ps}
    pos, neg = D.task_partition(split, "TB")
    assert cats(pos) == {"ts-tk"} and cats(neg) == {"ts-ntk", "nts-ntk"}
    pos, neg = D.task_partition(split, "TO")
    assert cats(pos) == {"ts-tk"} and "nts-tk" in cats(neg) and len(neg) == 60
    pos, neg = D.task_partition(split, "C")
    assert cats(pos) == {"ts-tk", "nts-tk"} and cats(neg) == {"ts-ntk", "nts-ntk"}
    partial = D.PairSplit([p for p in split.pairs if p.category != "ts-ntk"], 0, "kws-pairs")
    with pytest.raises(ProtocolError, match="ts-ntk"):
        D.task_partition(partial, "TB")


# ---------------------------------------------------------------- samplers

def test_mtl_batches_example():
    batches = D.mtl_batches(400, 32, seed=0)
    assert [len(b) for b in batches] == [32] * 12 + [16]
    assert sorted(np.concatenate(batches).tolist()) == list(range(400))
    assert all(np.array_equal(a, b) for a, b in zip(batches, D.mtl_batches(400, 32, seed=0)))
    assert not np.array_equal(batches[0], D.mtl_batches(400, 32, seed=0, epoch=1)[0])
    with pytest.raises(ValueError):
        D.mtl_batches(10, 32, 0)


def test_mtl_batch_sampler_carries_both_labels(small_corpus):
    it = D.mtl_batch_sampler(small_corpus, 64, seed=1)
    batch = next(it)
    assert len(batch) == 64 and all(u.keyword and u.speaker for u in batch)


def test_tb_batches_never_have_nts_tk(small_corpus):
    train = [u for u in small_corpus if u.split == "train"]
    sampler = D.trm_batch_sampler(train, "TB", 4, seed=0)
    for _ in range(1000):
        b = sampler.sample()
        assert len(set(b.keyword)) == 4
        assert D.nts_tk_negatives(b.keyword, b.speaker) == 0
        for i, k, s in zip(b.utt, b.keyword, b.speaker):
            assert (train[i].keyword, train[i].speaker) == (k, s)


def test_tb_same_speaker_groups_give_ts_ntk_negatives(small_corpus):
    train = [u for u in small_corpus if u.split == "train"]
    sampler = D.trm_batch_sampler(train, "TB", 4, seed=0, group_fraction=0.5)
    b = sampler.sample()
    assert len(set(b.speaker)) < 4
    single = D.trm_batch_sampler(train, "TB", 4, seed=0, group_fraction=0.0).sample()
    assert len(single.keyword) == 4


def test_to_batches_have_nts_tk(small_corpus):
    train = [u for u in small_corpus if u.split == "train"]
    sampler = D.trm_batch_sampler(train, "TO", 4, seed=0, group_fraction=0.5)
    for _ in range(200):
        b = sampler.sample()
        assert D.nts_tk_negatives(b.keyword, b.speaker) >= 1


def test_trm_sampler_deterministic(small_corpus):
    train = [u for u in small_corpus if u.split == "train"]
    for task in ("TB", "TO"):
        a = D.trm_batch_sampler(train, task, 4, seed=5)
        b = D.trm_batch_sampler(train, task, 4, seed=5)
        for _ in range(20):
            x, y = a.sample(), b.sample()
            assert x.utt.tolist() == y.utt.tolist() and x.keyword == y.keyword


def test_trm_sampler_rejects_small_inventory(small_corpus):
    train = [u for u in small_corpus if u.split == "train"]
    with pytest.raises(ProtocolError):
        D.trm_batch_sampler(train, "TB", 6, seed=0)  # only 5 keywords
    with pytest.raises(ValueError):
        D.trm_batch_sampler(train, "TO", 1, seed=0)
    with pytest.raises(ProtocolError):
        D.check_trm_batch("TB", ["yes", "yes"], ["a", "b"])
    with pytest.raises(ProtocolError):
        D.check_trm_batch("TO", ["yes", "no"], ["a", "b"])


# ---------------------------------------------------------------- GSC ingestion

def _wav(path, n=16000, value=0.1):
    features.write_wav(path, features.Waveform(np.full(n, value)))


def _fake_gsc(root, commands=("yes", "no"), extra=("bed",), bad=()):
    for w in commands + extra:
        os.makedirs(root / w)
        for spk in ("abc123", "0f1e2d"):
            _wav(root / w / f"{spk}_nohash_0.wav", n=12000)
    for w, name in bad:
        (root / w / name).write_bytes(b"")
    os.makedirs(root / "_background_noise_")
    _wav(root / "_background_noise_" / "white.wav", n=48000, value=0.02)


def test_gsc_ingest_labels(tmp_path):
    _fake_gsc(tmp_path)
    utts = D.ingest_gsc(str(tmp_path), commands=("yes", "no"), silence_per_split={"train": 2, "test": 1})
    by_id = {u.id: u for u in utts}
    assert (by_id["yes/abc123_nohash_0.wav"].keyword, by_id["yes/abc123_nohash_0.wav"].speaker) == ("yes", "abc123")
    assert by_id["bed/0f1e2d_nohash_0.wav"].keyword == "Unknown"
    sil = [u for u in utts if u.keyword == "Silence"]
    assert len(sil) == 3 and all(len(D.load_waveform(u)) == 16000 for u in sil)
    assert len(D.load_waveform(by_id["no/abc123_nohash_0.wav"])) == 16000  # zero-padded
    D.check_speaker_disjoint(utts)
    for u in utts:
        if u.speaker:
            assert u.split == D.gsc_hash_split(u.id)


def test_gsc_split_lists_take_precedence(tmp_path):
    _fake_gsc(tmp_path)
    (tmp_path / "testing_list.txt").write_text("yes/abc123_nohash_0.wav\n")
    (tmp_path / "validation_list.txt").write_text("no/0f1e2d_nohash_0.wav\n")
    by_id = {u.id: u for u in D.ingest_gsc(str(tmp_path), commands=("yes", "no"))}
    assert by_id["yes/abc123_nohash_0.wav"].split == "test"
    assert by_id["no/0f1e2d_nohash_0.wav"].split == "validation"
    assert by_id["bed/abc123_nohash_0.wav"].split == "train"


def test_gsc_itemized_errors(tmp_path):
    _fake_gsc(tmp_path, bad=[("yes", "README.wav"), ("bed", "x_nohash.wav")])
    with pytest.raises(D.GscIngestError) as err:
        D.ingest_gsc(str(tmp_path), commands=("yes", "no", "up", "down"))
    problems = err.value.problems
    assert "missing keyword folder 'up'" in problems and "missing keyword folder 'down'" in problems
    assert "unparsable filename yes/README.wav" in problems
    assert "unparsable filename bed/x_nohash.wav" in problems
    with pytest.raises(D.GscIngestError, match="does not exist"):
        D.ingest_gsc(str(tmp_path / "nope"))


def test_feature_cache_reused(tmp_path, small_corpus):
    utts = small_corpus[:3]
    a = D.compute_features(utts, cache_dir=str(tmp_path))
    assert len(os.listdir(tmp_path)) == 3
    b = D.compute_features(utts, cache_dir=str(tmp_path))
    assert a.shape == (3, 98, 40) and a.tobytes() == b.tobytes()

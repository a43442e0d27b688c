import numpy as np
import pytest

from pkmtl import adaptation, dataset, model, synthetic


@pytest.fixture(scope="session")
def small_cfg():
    return synthetic.SyntheticConfig(n_speakers=8, n_keywords=5, utts_per_pair=10, seed=3)


@pytest.fixture(scope="session")
def small_corpus(small_cfg):
    return dataset.generate_synthetic(small_cfg)


@pytest.fixture(scope="session")
def mixed_corpus():
    """Synthetic corpus with Unknown words and Silence clips."""
    cfg = synthetic.SyntheticConfig(n_speakers=12, n_keywords=4, utts_per_pair=3, n_unknown_words=2,
                                    silence_per_speaker=2, seed=5)
    return dataset.generate_synthetic(cfg)


# 8 speakers / 5 keywords split 6 train + 2 validation: the calibrated training
# set (data seed 3) for the model-level examples
MTL_CFG = synthetic.SyntheticConfig(n_speakers=8, n_keywords=5, utts_per_pair=10, seed=3, test_fraction=0.0)


@pytest.fixture(scope="session")
def mtl_corpus():
    return dataset.generate_synthetic(MTL_CFG)


@pytest.fixture(scope="session")
def mtl_features(mtl_corpus, tmp_path_factory):
    return dataset.compute_features(mtl_corpus, cache_dir=str(tmp_path_factory.mktemp("feat")))


class Trained:
    """A model trained on the small corpus with per-split handles."""

    def __init__(self, utts, feats, epochs, lam, seed=0):
        self.idx = {s: [i for i, u in enumerate(utts) if u.split == s] for s in dataset.SPLITS}
        self.utts = {s: [utts[i] for i in ix] for s, ix in self.idx.items()}
        self.feats = {s: feats[ix] for s, ix in self.idx.items()}
        kw = dataset.keyword_classes(self.utts["train"])
        spk = dataset.speaker_classes(self.utts["train"])
        self.kw_t, self.spk_t = model.label_indices(self.utts["train"], kw, spk)
        self.val = model.build_validation(self.utts["validation"], self.feats["validation"], kw)
        init = model.MtlModel.create(model.EncoderConfig(), kw, spk, seed=seed)
        self.result = model.train_mtl(init, self.feats["train"], self.kw_t, self.spk_t, epochs=epochs, seed=seed,
                                      lam=lam, validation=self.val)
        self.model = self.result.model
        self.system = adaptation.PkMtlSystem(self.model)
        self.tables = {s: adaptation.EmbeddingTable.build(self.model, self.utts[s], self.feats[s])
                       for s in dataset.SPLITS if self.utts[s]}


@pytest.fixture(scope="session")
def trained(mtl_corpus, mtl_features):
    return Trained(mtl_corpus, mtl_features, epochs=30, lam=0.1)


@pytest.fixture(scope="session")
def trained_lam0(mtl_corpus, mtl_features):
    return Trained(mtl_corpus, mtl_features, epochs=30, lam=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

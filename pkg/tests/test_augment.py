import numpy as np
import pytest
from scipy import stats

from neurofuse import augment, bench, dataio, masks
from neurofuse import model as M
from neurofuse.augment import AugmentConfig
from neurofuse.dataio import ValidationError


def _instance(seed=3):
    spec = bench.SynthSpec(
        subjects_per_class=4,
        num_nodes=8,
        num_knowledge=5,
        planted_edges=4,
        planted_knowledge=2,
        knowledge_dim=6,
        seed=seed,
    )
    ds, kb, truth = bench.generate(spec)
    cfg = M.ModelConfig(
        arch="gcn", num_nodes=8, num_classes=2, knowledge_dim=6, d_hidden=8, d_fusion=8
    )
    return M.build_model(cfg, seed=seed), ds, kb


def test_augment_config_validation():
    with pytest.raises(ValidationError):
        AugmentConfig(threshold=0.0).validate()
    with pytest.raises(ValidationError):
        AugmentConfig(threshold=1.0).validate()
    AugmentConfig(threshold=0.5).validate()


def test_all_above_threshold_is_identity():
    _, ds, _ = _instance()
    g = ds.subjects[0]
    pair = masks.init_mask_pair(8, 5, 0.5, "x")
    pair.alpha.data[:] = np.log(9.0)  # sigma = 0.9
    cfg = AugmentConfig(threshold=0.5)
    out = augment.augment_graph(g, pair, cfg, np.random.default_rng(0))
    assert np.array_equal(out, g.adjacency)


def test_below_threshold_retention_is_fair_coin():
    _, ds, _ = _instance()
    g = ds.subjects[0]
    pair = masks.init_mask_pair(8, 5, 0.5, "x")
    pair.alpha.data[:] = 50.0
    edge = (0, 1)
    e_index = 0  # first upper-triangular pair
    pair.alpha.data[e_index] = np.log(1.0 / 9.0)  # sigma = 0.1 for this one edge
    cfg = AugmentConfig(threshold=0.5)
    rng = np.random.default_rng(123)
    kept = 0
    n = 10_000
    for _ in range(n):
        out = augment.augment_graph(g, pair, cfg, rng)
        kept += out[edge] != 0.0
    freq = kept / n
    assert 0.48 <= freq <= 0.52
    chi2 = (kept - n / 2) ** 2 / (n / 2) + ((n - kept) - n / 2) ** 2 / (n / 2)
    assert chi2 < stats.chi2.ppf(0.99, df=1)


def test_above_threshold_edges_always_retained():
    _, ds, _ = _instance()
    g = ds.subjects[1]
    pair = masks.init_mask_pair(8, 5, 0.5, "x")
    rng_init = np.random.default_rng(5)
    pair.alpha.data[:] = rng_init.normal(size=pair.num_edges)
    cfg = AugmentConfig(threshold=0.5)
    sigma = 1.0 / (1.0 + np.exp(-pair.alpha.data))
    iu = np.triu_indices(8, k=1)
    above = sigma >= 0.5
    rng = np.random.default_rng(6)
    for _ in range(1000):
        out = augment.augment_graph(g, pair, cfg, rng)
        kept = out[iu] != 0.0
        assert kept[above].all()


def test_augmentation_never_creates_edges():
    _, ds, _ = _instance()
    g = ds.subjects[0]
    w = g.adjacency.copy()
    w[0, 1] = w[1, 0] = 0.0
    w[2, 5] = w[5, 2] = 0.0
    g2 = dataio.Connectome("z", 8, w, 0, "female")
    pair = masks.init_mask_pair(8, 5, 0.5, "x")
    pair.alpha.data[:] = 50.0
    out = augment.augment_graph(g2, pair, AugmentConfig(), np.random.default_rng(7))
    assert set(zip(*np.nonzero(out))) <= set(zip(*np.nonzero(w)))
    assert out[0, 1] == 0.0 and out[2, 5] == 0.0


def test_augment_fusion_cases():
    cfg = AugmentConfig(threshold=0.5)
    ones = augment.augment_fusion(np.full(6, 50.0), cfg, np.random.default_rng(8))
    assert np.array_equal(ones, np.ones(6))
    rng = np.random.default_rng(9)
    draws = np.array([augment.augment_fusion(np.full(1, -50.0), cfg, rng)[0] for _ in range(10_000)])
    assert set(np.unique(draws)) <= {0.0, 1.0}
    assert 0.48 <= draws.mean() <= 0.52
    with pytest.raises(ValidationError):
        augment.augment_fusion(np.zeros(0), cfg, rng)


def test_augment_size_mismatch():
    _, ds, _ = _instance()
    pair = masks.init_mask_pair(6, 5, 0.5, "x")
    with pytest.raises(ValidationError):
        augment.augment_graph(ds.subjects[0], pair, AugmentConfig(), np.random.default_rng(0))


def _maskset_for(ds, kb):
    pairs = {
        g: masks.init_mask_pair(ds.num_nodes, kb.count, 0.5, g) for g in ds.groups
    }
    return masks.MaskSet(pairs=pairs, lambdas=(1, 1, 0.5, 0.1), tau=0.5)


def test_finetune_zero_epochs_unchanged():
    model, ds, kb = _instance()
    ms = _maskset_for(ds, kb)
    split = dataio.Split(train=[0, 1, 4, 5], val=[2, 6], test=[3, 7])
    before = model.param_checksum()
    model2, history = augment.finetune(model, ms, ds, kb, split, AugmentConfig(epochs=0))
    assert history == []
    assert model2.param_checksum() == before


def test_finetune_missing_group_pair():
    model, ds, kb = _instance()
    ms = _maskset_for(ds, kb)
    del ms.pairs["male"]
    split = dataio.Split(train=[0, 1, 4, 5], val=[2, 6], test=[3, 7])
    with pytest.raises(masks.GroupingError):
        augment.finetune(model, ms, ds, kb, split, AugmentConfig(epochs=1))


def test_finetune_deterministic_and_masks_untouched():
    split = dataio.Split(train=[0, 1, 4, 5], val=[2, 6], test=[3, 7])

    def run():
        model, ds, kb = _instance(seed=9)
        ms = _maskset_for(ds, kb)
        alpha_before = {g: p.alpha.data.copy() for g, p in ms.pairs.items()}
        model, history = augment.finetune(
            model, ms, ds, kb, split, AugmentConfig(epochs=2, learning_rate=1e-3, seed=4)
        )
        for g, p in ms.pairs.items():
            assert np.array_equal(p.alpha.data, alpha_before[g])
        return history, model.param_checksum()

    h1, c1 = run()
    h2, c2 = run()
    assert h1 == h2
    assert c1 == c2

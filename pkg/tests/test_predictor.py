import math

import numpy as np
import pytest

from pathgen import autodiff as ad
from pathgen.crossmodal import PatchSet
from pathgen.predictor import (MCATGR, PredictorConfig, PredictorTrainConfig, distributed_predict,
                               evaluate_loss, grade_loss, init_mcat_gr, joint_loss, mcat_gr_forward,
                               mcat_gr_logits, risk_score, survival_curve, survival_nll_loss,
                               train_mcat_gr)

SIZES = (2, 3, 3, 2, 4, 2)
TINY = PredictorConfig(group_sizes=SIZES, patch_dim=5, embed_dim=8, hidden=8, heads=2, ff_mult=2,
                       path_layers=1, gene_layers=1)


def _case(m=4, seed=0):
    rng = np.random.default_rng(seed)
    return PatchSet(rng.normal(size=(m, 5)), [(0, j) for j in range(m)]), rng.normal(size=16)


# -- forward contract ---------------------------------------------------------

def test_output_invariants():
    params = init_mcat_gr(TINY, 0)
    ps, genes = _case()
    out = mcat_gr_forward(ps, genes, params, TINY)
    assert out.grade_probs.sum() == pytest.approx(1.0, abs=1e-5)
    assert (out.hazards > 0).all() and (out.hazards < 1).all()
    assert np.all(np.diff(out.survival) <= 0)
    assert -5 <= out.risk <= -1
    assert out.coattention.shape == (6, 4)
    np.testing.assert_allclose(out.coattention.sum(1), 1, atol=1e-5)


def test_zero_profile_changes_risk_but_stays_valid():
    params = init_mcat_gr(TINY, 1)
    ps, genes = _case(seed=1)
    real = mcat_gr_forward(ps, genes, params, TINY)
    zero = mcat_gr_forward(ps, np.zeros(16), params, TINY)
    assert zero.risk != real.risk
    assert zero.grade_probs.sum() == pytest.approx(1.0, abs=1e-5)
    assert -5 <= zero.risk <= -1


def test_patches_only_variant_has_no_gene_parameters():
    cfg = PredictorConfig(**{**TINY.__dict__, "use_genes": False})
    params = init_mcat_gr(cfg, 0)
    assert not any(k.startswith(("genc", "coattn", "gtf", "gpool")) for k in params)
    out = MCATGR(params, cfg).predict(_case()[0])
    assert out.coattention is None
    assert -5 <= out.risk <= -1


def test_grade_head_ignores_gene_transformer():
    # genes reach the grade head only through co-attention queries
    params = init_mcat_gr(TINY, 2)
    ps, genes = _case(seed=2)
    base = mcat_gr_forward(ps, genes, params, TINY)
    for k in [k for k in params if k.startswith(("gtf", "gpool"))]:
        params[k] = params[k] + 0.3
    moved = mcat_gr_forward(ps, genes, params, TINY)
    np.testing.assert_array_equal(base.grade_probs, moved.grade_probs)
    assert base.risk != moved.risk


def test_batched_prediction_matches_single_and_handles_ragged_sets():
    params = init_mcat_gr(TINY, 3)
    cases = [_case(m, s) for s, m in enumerate((3, 5, 4))]
    probs, hazards, risks = MCATGR(params, TINY).predict_many([c[0] for c in cases],
                                                              np.stack([c[1] for c in cases]))
    for i, (ps, g) in enumerate(cases):
        one = mcat_gr_forward(ps, g, params, TINY)
        np.testing.assert_allclose(probs[i], one.grade_probs, atol=1e-5)
        assert risks[i] == pytest.approx(one.risk, abs=1e-5)


# -- survival transforms -------------------------------------------------------

def test_risk_limits():
    assert risk_score(np.zeros(4)) == -5.0
    assert risk_score(np.ones(4)) == -1.0
    assert risk_score(np.full(4, 1e-9)) == pytest.approx(-5.0, abs=1e-7)


def test_survival_curve_is_running_product():
    h = np.random.default_rng(0).uniform(size=(10, 4))
    direct = np.array([[np.prod(1 - row[:t + 1]) for t in range(4)] for row in h])
    np.testing.assert_allclose(survival_curve(h), direct, atol=1e-6)
    assert np.all(np.diff(survival_curve(h), axis=1) <= 0)


# -- losses -------------------------------------------------------------------

def test_grade_loss_examples():
    assert grade_loss(np.array([1.0, 0.0, 0.0]), 0) < 1e-6
    expected = -(math.log(1 / 3) + 2 * math.log(2 / 3)) / 3
    assert expected == pytest.approx(0.6365, abs=1e-4)
    for y in range(3):
        assert grade_loss(np.full(3, 1 / 3), y) == pytest.approx(expected)


def test_grade_loss_label_range():
    with pytest.raises(ValueError):
        grade_loss(np.full(3, 1 / 3), 3)


def test_survival_loss_examples():
    assert survival_nll_loss(np.array([1.0, 0.2, 0.3, 0.4]), 1, False) < 1e-6
    assert survival_nll_loss(np.zeros(4), 4, True) < 1e-6
    loss = survival_nll_loss(np.array([0.1, 0.5, 0.3, 0.3]), 2, False)
    assert loss == pytest.approx(-(math.log(0.9) + math.log(0.5)), abs=1e-9)
    assert loss == pytest.approx(0.7985, abs=1e-4)


def test_censored_loss_uses_survival_through_own_bin():
    h = np.array([0.1, 0.2, 0.3, 0.4])
    assert survival_nll_loss(h, 3, True) == pytest.approx(-math.log(0.9 * 0.8 * 0.7))


def test_survival_loss_bin_range():
    with pytest.raises(ValueError):
        survival_nll_loss(np.full(4, 0.5), 5, False)


def test_graph_losses_match_array_losses():
    rng = np.random.default_rng(0)
    probs, haz = rng.uniform(0.05, 0.95, (3, 3)), rng.uniform(0.05, 0.95, (3, 4))
    labels, bins, cens = np.array([0, 2, 1]), np.array([1, 3, 4]), np.array([0.0, 1.0, 0.0])
    with ad.precision(np.float64):
        g = float(grade_loss(ad.Tensor(probs), labels).data)
        s = float(survival_nll_loss(ad.Tensor(haz), bins, cens).data)
    assert g == pytest.approx(grade_loss(probs, labels), rel=1e-12)
    assert s == pytest.approx(survival_nll_loss(haz, bins, cens), rel=1e-12)


@pytest.mark.parametrize("lam, swap, expected", [(0.0, False, 2.0), (1.0, False, 1.0),
                                                 (0.3, False, 1.7), (0.3, True, 1.3)])
def test_joint_loss(lam, swap, expected):
    assert joint_loss(1.0, 2.0, lam, swap) == pytest.approx(expected)


def test_joint_loss_is_linear():
    a = joint_loss(1.0, 2.0, 0.4) + joint_loss(3.0, 5.0, 0.4)
    assert a == pytest.approx(joint_loss(4.0, 7.0, 0.4))
    with pytest.raises(ValueError):
        joint_loss(1.0, 1.0, 1.5)


# -- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(2))
def test_forward_gradient_matches_fd(seed):
    params = init_mcat_gr(TINY, seed)
    rng = np.random.default_rng(seed)
    inputs = {"patches": rng.normal(size=(2, 3, 5)), "genes": rng.normal(size=(2, 16))}

    def loss(p, x):
        gl, hl, _ = mcat_gr_logits(p, x["patches"], x["genes"], TINY)
        return joint_loss(grade_loss(ad.sigmoid(gl), np.array([0, 2])),
                          survival_nll_loss(ad.sigmoid(hl), np.array([1, 3]), np.array([0.0, 1.0])))
    assert ad.finite_difference_check(loss, params, inputs).max_rel_error < 1e-3


# -- distributed prediction ----------------------------------------------------

def test_single_patch_heatmap_equals_whole_slide_prediction():
    params = init_mcat_gr(TINY, 0)
    ps = PatchSet(np.random.default_rng(0).normal(size=(1, 5)), [(1, 2)])
    genes = np.random.default_rng(1).normal(size=16)
    out = distributed_predict(ps, genes, params, TINY)
    whole = mcat_gr_forward(ps, genes, params, TINY)
    assert out["risk_grid"].shape == (2, 3)
    assert out["risk_grid"][1, 2] == pytest.approx(whole.risk, abs=1e-6)
    assert np.isnan(out["risk_grid"][0, 0])
    np.testing.assert_allclose(out["grade_grid"][1, 2], whole.grade_probs, atol=1e-6)


def test_homogeneous_slide_gives_constant_heatmap():
    params = init_mcat_gr(TINY, 1)
    row = np.random.default_rng(2).normal(size=5)
    ps = PatchSet(np.tile(row, (6, 1)), [(r, c) for r in range(2) for c in range(3)])
    grid = distributed_predict(ps, None, params, TINY)["risk_grid"]
    assert np.ptp(grid) < 1e-6


def test_two_region_slide_gives_bimodal_heatmap():
    rng = np.random.default_rng(0)
    # a trained model: risk follows the first embedding coordinate
    n, m = 96, 4
    sets, bins = [], []
    for i in range(n):
        high = i % 2 == 0
        emb = rng.normal(size=(m, 5)) * 0.3
        emb[:, 0] += 2.0 if high else -2.0
        sets.append(PatchSet(emb, [(0, j) for j in range(m)]))
        bins.append(1 if high else 4)
    cfg = PredictorConfig(**{**TINY.__dict__, "use_genes": False})
    params, _, _ = train_mcat_gr(sets, None, np.array([0, 2] * (n // 2)), np.array(bins),
                                 np.zeros(n), cfg, PredictorTrainConfig(epochs=15, batch_size=16,
                                                                        lr=3e-3))
    emb = rng.normal(size=(16, 5)) * 0.3
    emb[:8, 0] += 2.0
    emb[8:, 0] -= 2.0
    slide = PatchSet(emb, [(r, c) for r in range(4) for c in range(4)])
    out = distributed_predict(slide, None, params, cfg)
    a, b = out["risk_grid"][:2].ravel(), out["risk_grid"][2:].ravel()
    assert a.mean() - b.mean() > 3 * max(a.std(), b.std())
    assert out["mean_risk"] == pytest.approx(out["risk_grid"].mean())


def test_distributed_predict_errors():
    params = init_mcat_gr(TINY, 0)
    with pytest.raises(ValueError):
        distributed_predict(_case()[0], None, params, TINY, window=0)


def test_window_groups_consecutive_patches():
    params = init_mcat_gr(TINY, 0)
    ps, genes = _case(m=4)
    out = distributed_predict(ps, genes, params, TINY, window=2)
    grid = out["risk_grid"][0]
    assert grid[0] == grid[1] and grid[2] == grid[3]


# -- training -----------------------------------------------------------------

def _toy(n=32, seed=0):
    rng = np.random.default_rng(seed)
    sets = [PatchSet(rng.normal(size=(3, 5)), [(0, j) for j in range(3)]) for _ in range(n)]
    return (sets, rng.normal(size=(n, 16)), rng.integers(0, 3, n), rng.integers(1, 5, n),
            rng.integers(0, 2, n))


def test_training_is_resumable_and_deterministic():
    data = _toy()
    tc = PredictorTrainConfig(epochs=2, batch_size=8, lr=1e-3, seed=4)
    p_full, _, h_full = train_mcat_gr(*data, TINY, tc)
    p1, o1, h1 = train_mcat_gr(*data, TINY, PredictorTrainConfig(epochs=1, batch_size=8, lr=1e-3, seed=4))
    p2, _, h2 = train_mcat_gr(*data, TINY, tc, p1, o1, start_epoch=1)
    assert h1["train"] + h2["train"] == h_full["train"]
    assert all(p_full[k].tobytes() == p2[k].tobytes() for k in p_full)


def test_validation_selection_returns_best_epoch():
    data = _toy()
    val = _toy(16, seed=1)
    epochs = []
    params, _, hist = train_mcat_gr(*data, TINY, PredictorTrainConfig(epochs=3, batch_size=8, lr=1e-2),
                                    val=val, callback=lambda e, p, o, h, b: epochs.append(e))
    assert epochs == [0, 1, 2] and len(hist["val"]) == 3
    loss = evaluate_loss(MCATGR(params, TINY), *val, 0.3)
    assert loss == pytest.approx(min(hist["val"]), rel=1e-6)

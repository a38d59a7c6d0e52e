import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdyn.errors import ValidationError
from cdyn.metrics import (
    auc_exact,
    auprc_step,
    de_auc_auprc,
    delta_pearson,
    linear_block_fit,
    mae_condition,
    mcc_nu,
    probe_grounding,
    pseudobulk_r2,
    rank_average_ties,
    rmse_condition,
    spearman,
)
from cdyn.rng import spawn_rng


# -- spearman ---------------------------------------------------------------


def test_spearman_monotone_cube_is_one():
    x = np.array([0.3, -1.2, 2.0, 0.9, -0.1])
    assert spearman(x, x ** 3) == pytest.approx(1.0, abs=1e-12)


def test_spearman_reversal_is_minus_one():
    x = np.arange(6.0)
    assert spearman(x, -x) == pytest.approx(-1.0, abs=1e-12)


def test_spearman_hand_case():
    assert spearman(np.array([1, 2, 3, 4.0]), np.array([1, 3, 2, 4.0])) == \
        pytest.approx(0.8, abs=1e-12)


def test_spearman_constant_input_flags_zero():
    assert spearman(np.ones(5), np.arange(5.0)) == 0.0


def test_spearman_matches_d2_formula_without_ties():
    rng = spawn_rng(1, "sp")
    for _ in range(20):
        n = int(rng.integers(3, 40))
        x = rng.permutation(n).astype(float)
        y = rng.permutation(n).astype(float)
        d = rank_average_ties(x) - rank_average_ties(y)
        oracle = 1.0 - 6.0 * np.square(d).sum() / (n * (n * n - 1))
        assert spearman(x, y) == pytest.approx(oracle, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_spearman_invariant_to_increasing_transforms(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=12)
    y = rng.normal(size=12)
    base = spearman(x, y)
    assert spearman(np.exp(x), y) == pytest.approx(base, abs=1e-12)
    assert spearman(x, 3.0 * y + 7.0) == pytest.approx(base, abs=1e-12)


# -- auc / auprc ----------------------------------------------------------------


def brute_force_auc(labels, scores):
    pos = scores[labels]
    neg = scores[~labels]
    wins = ties = 0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def test_auc_worked_example():
    labels = np.array([1, 0, 1, 0], dtype=bool)
    scores = np.array([0.9, 0.8, 0.7, 0.1])
    assert auc_exact(labels, scores) == 0.75


def test_auc_all_ties_is_half():
    labels = np.array([1, 0, 1, 0], dtype=bool)
    assert auc_exact(labels, np.ones(4)) == 0.5


def test_auc_perfect_ranking():
    labels = np.array([1, 1, 0, 0], dtype=bool)
    scores = np.array([4.0, 3.0, 2.0, 1.0])
    assert auc_exact(labels, scores) == 1.0
    assert auprc_step(labels, scores) == 1.0


def test_auc_equals_pairwise_counting_on_200_instances():
    rng = spawn_rng(2, "auc")
    for _ in range(200):
        n = int(rng.integers(4, 30))
        labels = rng.random(n) < 0.4
        if not labels.any() or labels.all():
            labels[0], labels[-1] = True, False
        scores = np.round(rng.normal(size=n), 1)  # rounding forces ties
        assert auc_exact(labels, scores) == brute_force_auc(labels, scores)


def test_auprc_step_integration_small_case():
    labels = np.array([1, 0, 1, 0], dtype=bool)
    scores = np.array([0.9, 0.8, 0.7, 0.1])
    # thresholds: precision 1/1 at recall 1/2, then 2/3 at recall 1
    expected = 0.5 * 1.0 + 0.5 * (2.0 / 3.0)
    assert auprc_step(labels, scores) == pytest.approx(expected, abs=1e-12)


# -- mcc ---------------------------------------------------------------------------


def test_mcc_identity():
    rng = spawn_rng(3, "mcc")
    z = rng.normal(size=(200, 3))
    val, assignment = mcc_nu(z, z)
    assert val == pytest.approx(1.0, abs=1e-12)
    assert assignment == [0, 1, 2]


def test_mcc_permutation_and_scaling():
    rng = spawn_rng(4, "mcc")
    z = rng.normal(size=(300, 2))
    z_hat = np.column_stack([-3.0 * z[:, 1], 2.0 * z[:, 0]])
    val, assignment = mcc_nu(z_hat, z)
    assert val == pytest.approx(1.0, abs=1e-12)
    assert assignment == [1, 0]


def test_mcc_zero_variance_column_counts_zero():
    rng = spawn_rng(5, "mcc")
    z = rng.normal(size=(100, 2))
    z_hat = z.copy()
    z_hat[:, 1] = 5.0
    val, _ = mcc_nu(z_hat, z)
    assert val == pytest.approx(0.5, abs=1e-6)


def test_mcc_assignment_matches_exhaustive_oracle():
    rng = spawn_rng(6, "mcc")
    for _ in range(10):
        z_true = rng.normal(size=(150, 4))
        mix = rng.normal(size=(4, 4))
        z_hat = z_true @ mix
        val, assignment = mcc_nu(z_hat, z_true)
        corr = np.zeros((4, 4))
        for j in range(4):
            for k in range(4):
                corr[j, k] = abs(np.corrcoef(z_hat[:, j], z_true[:, k])[0, 1])
        best = max(itertools.permutations(range(4)),
                   key=lambda p: sum(corr[j, p[j]] for j in range(4)))
        best_val = np.mean([corr[j, best[j]] for j in range(4)])
        assert val == pytest.approx(best_val, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_mcc_invariant_to_permutation_and_scaling(seed):
    rng = np.random.default_rng(seed)
    z_true = rng.normal(size=(120, 3))
    z_hat = z_true @ rng.normal(size=(3, 3))
    base, _ = mcc_nu(z_hat, z_true)
    perm = rng.permutation(3)
    scales = rng.choice([-2.0, 0.5, 3.0], size=3)
    transformed = z_hat[:, perm] * scales
    val, _ = mcc_nu(transformed, z_true)
    assert val == pytest.approx(base, abs=1e-12)


# -- linear fit ----------------------------------------------------------------------


def test_linear_fit_exact_affine_recovery():
    rng = spawn_rng(7, "lin")
    z = rng.normal(size=(400, 2))
    a = rng.normal(size=(2, 2)) + np.eye(2)
    z_hat = z @ a.T + np.array([0.5, -1.0])
    report = linear_block_fit(z_hat, z, split_seed=0)
    assert not report.degenerate
    for r2 in report.r2:
        assert r2 >= 1.0 - 1e-10


def test_linear_fit_single_coordinate_affine():
    rng = spawn_rng(8, "lin")
    z = rng.normal(size=(100, 1))
    report = linear_block_fit(2.0 * z + 1.0, z, split_seed=0)
    assert report.r2[0] >= 1.0 - 1e-10


def test_linear_fit_noise_near_zero():
    rng = spawn_rng(9, "lin")
    for seed in range(5):
        z = rng.normal(size=(500, 2))
        noise = rng.normal(size=(500, 2))
        report = linear_block_fit(noise, z, split_seed=seed)
        assert max(report.r2) < 0.1


def test_linear_fit_rank_deficient_flags():
    rng = spawn_rng(10, "lin")
    z = rng.normal(size=(100, 2))
    z_hat = np.column_stack([z[:, 0], z[:, 0]])  # collinear design
    report = linear_block_fit(z_hat, z, split_seed=0)
    assert report.degenerate


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_linear_fit_invariant_to_affine_transform(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(300, 2))
    z_hat = np.tanh(z @ rng.normal(size=(2, 2)))
    base = linear_block_fit(z_hat, z, split_seed=3)
    a = rng.normal(size=(2, 2)) + 2 * np.eye(2)
    moved = z_hat @ a.T + rng.normal(size=2)
    transformed = linear_block_fit(moved, z, split_seed=3)
    for r_base, r_new in zip(base.r2, transformed.r2):
        assert r_new == pytest.approx(r_base, abs=1e-8)


# -- probe -------------------------------------------------------------------------


def test_probe_identity_recovers_perfectly():
    rng = spawn_rng(11, "probe")
    z = rng.normal(size=(400, 3))
    report = probe_grounding(z, z, split_seed=0, epochs=300)
    assert report.r2_mean >= 0.99
    assert report.spearman_mean >= 0.99


def test_probe_monotone_cube():
    rng = spawn_rng(12, "probe")
    z = rng.normal(size=(600, 2))
    report = probe_grounding(z ** 3, z, split_seed=0, epochs=500)
    assert report.r2_mean >= 0.95
    assert min(report.spearman_per_factor) >= 0.99


def test_probe_independent_noise_fails():
    rng = spawn_rng(13, "probe")
    for seed in range(5):
        z = rng.normal(size=(300, 2))
        noise = rng.normal(size=(300, 2))
        report = probe_grounding(noise, z, split_seed=seed, epochs=200)
        assert report.r2_mean <= 0.1


def test_probe_too_few_rows():
    with pytest.raises(ValidationError):
        probe_grounding(np.zeros((10, 2)), np.zeros((10, 2)))


# -- perturbation battery -------------------------------------------------------------


def test_pseudobulk_r2_passthrough_and_mean():
    rng = spawn_rng(14, "pb")
    obs = rng.normal(size=(6, 4))
    assert pseudobulk_r2(obs, obs) == 1.0
    center = np.tile(obs.mean(axis=0), (6, 1))
    assert pseudobulk_r2(center, obs) == pytest.approx(0.0, abs=1e-12)


def test_pseudobulk_r2_hand_case():
    obs = np.array([[0.0, 0.0], [2.0, 0.0]])
    pred = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert pseudobulk_r2(pred, obs) == pytest.approx(0.0, abs=1e-12)


def test_pseudobulk_r2_zero_variance_errors():
    with pytest.raises(ValidationError):
        pseudobulk_r2(np.ones((2, 3)), np.ones((2, 3)))


def test_mae_hand_cases():
    obs = np.array([[1.0, -1.0]])
    ctrl = np.zeros((1, 2))
    assert mae_condition(obs, obs, ctrl) == 0.0
    pred = obs + 0.5
    assert mae_condition(pred, obs, ctrl) == pytest.approx(0.5, abs=1e-12)
    assert mae_condition(np.zeros((1, 2)), obs, ctrl) == pytest.approx(1.0, abs=1e-12)


def test_rmse_consistent_with_mae_on_uniform_shift():
    obs = np.array([[1.0, -1.0, 0.5]])
    ctrl = np.zeros((1, 3))
    pred = obs + 0.3
    assert rmse_condition(pred, obs, ctrl) == pytest.approx(0.3, abs=1e-12)


def test_delta_pearson_cases():
    rng = spawn_rng(15, "dp")
    obs = rng.normal(size=(5, 4))
    ctrl = rng.normal(size=4)
    val, skipped = delta_pearson(obs, obs, ctrl)
    assert val == pytest.approx(1.0, abs=1e-12) and skipped == 0
    mirrored = 2 * ctrl[None, :] - obs
    val, _ = delta_pearson(mirrored, obs, ctrl)
    assert val == pytest.approx(-1.0, abs=1e-12)


def test_delta_pearson_collinear_hand_case():
    ctrl = np.zeros(3)
    obs = np.array([[1.0, 2.0, 3.0]])
    pred = np.array([[2.0, 4.0, 6.0]])
    val, _ = delta_pearson(pred, obs, ctrl)
    assert val == pytest.approx(1.0, abs=1e-12)


def test_delta_pearson_constant_shift_skipped():
    ctrl = np.zeros(3)
    obs = np.array([[1.0, 1.0, 1.0], [1.0, 2.0, 3.0]])
    pred = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    val, skipped = delta_pearson(pred, obs, ctrl)
    assert skipped == 1
    assert val == pytest.approx(1.0, abs=1e-12)


def test_de_auc_perfect_scores():
    rng = spawn_rng(16, "de")
    ctrl = rng.normal(size=10)
    obs = ctrl + rng.normal(size=10)
    auc, auprc = de_auc_auprc(obs, ctrl, obs, k=3)
    assert auc == 1.0 and auprc == 1.0


def test_de_auc_k_validation():
    with pytest.raises(ValidationError):
        de_auc_auprc(np.ones(4), np.zeros(4), np.ones(4), k=0)
    with pytest.raises(ValidationError):
        de_auc_auprc(np.ones(4), np.zeros(4), np.ones(4), k=4)

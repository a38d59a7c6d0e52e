"""Evaluation metrics: latent recovery, probe grounding, and the perturbation
prediction battery.

Recovery metrics witness the identifiability equivalence classes empirically:
mcc over the responsive block is invariant to permutation and componentwise
scaling, the linear fit over the invariant block is invariant to invertible
affine transforms, and the nonlinear probe measures decodability of the whole
latent system. The perturbation battery operates on pseudobulk profiles and
control-centered shifts.

Degenerate correlations (zero variance) map to 0 with a flag rather than an
error so batch evaluation never aborts mid-fold. All functions are pure;
folds and conditions may be evaluated concurrently over read-only data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .rng import spawn_rng
from .tape import AdamState, Tape, adam_step


# -- correlation primitives ------------------------------------------------------


def rank_average_ties(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their rank range."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    """(correlation, degenerate flag); constant input gives (0.0, True)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValidationError("pearson: inputs must be equal-length with >= 2 entries")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        return 0.0, True
    return float((xc * yc).sum() / denom), False


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation of average-tie ranks; 0 for constant input."""
    rho, _ = pearson(rank_average_ties(x), rank_average_ties(y))
    return rho


def auc_exact(labels: np.ndarray, scores: np.ndarray) -> float:
    """ROC AUC by the rank statistic, ties counted as 1/2."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("auc: need both positive and negative labels")
    ranks = rank_average_ties(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc_step(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under precision-recall by interpolation-free step integration.

    Thresholds sweep distinct score values from high to low; tied scores enter
    as one block.
    """
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValidationError("auprc: need at least one positive label")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = labels.size
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i:j + 1].sum())
        fp += (j - i + 1) - int(sorted_labels[i:j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(area)


# -- latent recovery ---------------------------------------------------------------


@dataclass
class RecoveryReport:
    mcc_nu: float
    assignment: list[int]
    linear_r2_inv: list[float]
    degenerate: bool = False


def mcc_nu(z_hat: np.ndarray, z_true: np.ndarray) -> tuple[float, list[int]]:
    """Mean absolute correlation under the best one-to-one assignment.

    assignment[j] is the true coordinate matched to estimated coordinate j.
    Zero-variance columns contribute 0 correlation.
    """
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z_true = np.asarray(z_true, dtype=np.float64)
    if z_hat.shape != z_true.shape:
        raise ValidationError("mcc_nu: shapes must match")
    d = z_hat.shape[1]
    corr = np.zeros((d, d))
    for j in range(d):
        for k in range(d):
            rho, _ = pearson(z_hat[:, j], z_true[:, k])
            corr[j, k] = abs(rho)
    rows, cols = linear_sum_assignment(-corr)
    assignment = [int(cols[np.where(rows == j)[0][0]]) for j in range(d)]
    return float(corr[rows, cols].mean()), assignment


@dataclass
class LinearFitReport:
    r2: list[float]
    degenerate: bool


def linear_block_fit(z_hat: np.ndarray, z_true: np.ndarray, split_seed: int = 0) -> LinearFitReport:
    """OLS with intercept from estimated to true coordinates; R2 on a held-out 20%."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z_true = np.asarray(z_true, dtype=np.float64)
    n, k = z_hat.shape
    if n < k + 2:
        raise ValidationError("linear_block_fit: too few rows")
    rng = spawn_rng(split_seed, "linear-split")
    perm = rng.permutation(n)
    cut = max(int(0.8 * n), k + 1)
    train, test = perm[:cut], perm[cut:]
    if test.size < 2:
        train, test = perm[:-2], perm[-2:]
    design = np.column_stack([z_hat, np.ones(n)])
    degenerate = bool(np.linalg.matrix_rank(design[train]) < k + 1)
    coef, *_ = np.linalg.lstsq(design[train], z_true[train], rcond=None)
    pred = design[test] @ coef
    r2 = []
    for c in range(z_true.shape[1]):
        resid = np.square(pred[:, c] - z_true[test, c]).sum()
        total = np.square(z_true[test, c] - z_true[test, c].mean()).sum()
        r2.append(float(1.0 - resid / total) if total > 0 else 0.0)
    return LinearFitReport(r2, degenerate)


# -- nonlinear probe -----------------------------------------------------------------


@dataclass
class ProbeReport:
    r2_per_factor: list[float]
    r2_mean: float
    spearman_per_factor: list[float]
    spearman_mean: float
    split_seed: int = 0


def _probe_tape(n_in: int, n_out: int, hidden: int, x: np.ndarray, y: np.ndarray):
    tape = Tape()
    w1 = tape.input((n_in, hidden))
    b1 = tape.input((1, hidden))
    w2 = tape.input((hidden, hidden))
    b2 = tape.input((1, hidden))
    w3 = tape.input((hidden, n_out))
    b3 = tape.input((1, n_out))
    xc = tape.constant(x)
    h1 = tape.tanh(tape.add(tape.matmul(xc, w1), b1))
    h2 = tape.tanh(tape.add(tape.matmul(h1, w2), b2))
    out = tape.add(tape.matmul(h2, w3), b3)
    tape.mark_loss(tape.mean(tape.square(tape.sub(out, tape.constant(y)))))
    return tape, out


def _probe_predict(params_flat, n_in, n_out, hidden, x):
    tape, out = _probe_tape(n_in, n_out, hidden, x, np.zeros((x.shape[0], n_out)))
    tape.forward(params_flat)
    return tape.value(out)


def probe_grounding(z_hat: np.ndarray, z_true: np.ndarray, split_seed: int = 0,
                    epochs: int = 500, hidden: int = 64, lr: float = 1e-2,
                    max_rows: int | None = None) -> ProbeReport:
    """Nonlinear decodability of the true factors from the learned latents.

    80/20 split; both sides standardized by the training-split affine; a
    2-hidden-layer width-`hidden` tanh regressor trained with full-batch Adam
    for `epochs`; per-factor R2 and Spearman reported on the held-out split.
    """
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z_true = np.asarray(z_true, dtype=np.float64)
    if z_hat.shape[0] != z_true.shape[0]:
        raise ValidationError("probe_grounding: row counts differ")
    if z_hat.shape[0] < 50:
        raise ValidationError("probe_grounding: need at least 50 rows")
    rng = spawn_rng(split_seed, "probe")
    perm = rng.permutation(z_hat.shape[0])
    if max_rows is not None and perm.size > max_rows:
        perm = perm[:max_rows]
    cut = int(0.8 * perm.size)
    train, test = perm[:cut], perm[cut:]

    def standardize(train_block, full_block):
        mean = train_block.mean(axis=0)
        std = train_block.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return (full_block - mean) / std

    xs = standardize(z_hat[train], z_hat)
    ys = standardize(z_true[train], z_true)
    n_in, n_out = z_hat.shape[1], z_true.shape[1]

    tape, _ = _probe_tape(n_in, n_out, hidden, xs[train], ys[train])
    init = spawn_rng(split_seed, "probe-init")
    params = np.concatenate([
        init.normal(scale=np.sqrt(2.0 / (n_in + hidden)), size=n_in * hidden),
        np.zeros(hidden),
        init.normal(scale=np.sqrt(1.0 / hidden), size=hidden * hidden),
        np.zeros(hidden),
        init.normal(scale=np.sqrt(1.0 / hidden), size=hidden * n_out),
        np.zeros(n_out),
    ])
    state = AdamState.init(params.size, lr=lr)
    for _ in range(epochs):
        tape.forward(params)
        params, state = adam_step(state, params, tape.backward())

    pred = _probe_predict(params, n_in, n_out, hidden, xs[test])
    truth = ys[test]
    r2, rho = [], []
    for c in range(n_out):
        resid = np.square(pred[:, c] - truth[:, c]).sum()
        total = np.square(truth[:, c] - truth[:, c].mean()).sum()
        r2.append(float(1.0 - resid / total) if total > 0 else 0.0)
        rho.append(spearman(pred[:, c], truth[:, c]))
    return ProbeReport(r2, float(np.mean(r2)), rho, float(np.mean(rho)), split_seed)


# -- perturbation battery ---------------------------------------------------------------


def pseudobulk_r2(pred_means: np.ndarray, obs_means: np.ndarray) -> float:
    """1 - sum ||pred - obs||^2 / sum ||obs - global mean||^2 over conditions."""
    pred_means = np.atleast_2d(np.asarray(pred_means, dtype=np.float64))
    obs_means = np.atleast_2d(np.asarray(obs_means, dtype=np.float64))
    if pred_means.shape != obs_means.shape:
        raise ValidationError("pseudobulk_r2: shapes differ")
    center = obs_means.mean(axis=0)
    denom = np.square(obs_means - center).sum()
    if denom == 0.0:
        raise ValidationError("pseudobulk_r2: zero variance across conditions")
    return float(1.0 - np.square(pred_means - obs_means).sum() / denom)


def mae_condition(pred_means: np.ndarray, obs_means: np.ndarray,
                  ctrl_means: np.ndarray) -> float:
    """Mean over conditions of mean |pred shift - obs shift| across genes."""
    pred_means = np.atleast_2d(pred_means)
    obs_means = np.atleast_2d(obs_means)
    ctrl_means = np.atleast_2d(ctrl_means)
    diffs = np.abs((pred_means - ctrl_means) - (obs_means - ctrl_means))
    return float(diffs.mean(axis=1).mean())


def rmse_condition(pred_means: np.ndarray, obs_means: np.ndarray,
                   ctrl_means: np.ndarray) -> float:
    pred_means = np.atleast_2d(pred_means)
    obs_means = np.atleast_2d(obs_means)
    ctrl_means = np.atleast_2d(ctrl_means)
    sq = np.square((pred_means - ctrl_means) - (obs_means - ctrl_means))
    return float(np.sqrt(sq.mean(axis=1)).mean())


def delta_pearson(pred_cells: np.ndarray, obs_cells: np.ndarray, ctrl_mean: np.ndarray,
                  gene_mask: np.ndarray | None = None) -> tuple[float, int]:
    """Mean cell-level correlation of control-centered shifts; rows are paired.

    Returns (mean correlation over usable cells, number of skipped cells).
    Cells whose shift vector is constant on either side are skipped.
    """
    pred_cells = np.atleast_2d(pred_cells)
    obs_cells = np.atleast_2d(obs_cells)
    if pred_cells.shape != obs_cells.shape:
        raise ValidationError("delta_pearson: prediction and observation shapes differ")
    ctrl_mean = np.asarray(ctrl_mean, dtype=np.float64)
    d_pred = pred_cells - ctrl_mean[None, :]
    d_obs = obs_cells - ctrl_mean[None, :]
    if gene_mask is not None:
        d_pred = d_pred[:, gene_mask]
        d_obs = d_obs[:, gene_mask]
    vals = []
    skipped = 0
    for i in range(d_pred.shape[0]):
        rho, degenerate = pearson(d_pred[i], d_obs[i])
        if degenerate:
            skipped += 1
        else:
            vals.append(rho)
    return (float(np.mean(vals)) if vals else 0.0), skipped


def de_auc_auprc(obs_mean_u: np.ndarray, obs_mean_ctrl: np.ndarray,
                 pred_mean_u: np.ndarray, k: int) -> tuple[float, float]:
    """Labels from the top-k true absolute shifts, scores from predicted shifts."""
    obs_mean_u = np.asarray(obs_mean_u, dtype=np.float64)
    obs_mean_ctrl = np.asarray(obs_mean_ctrl, dtype=np.float64)
    pred_mean_u = np.asarray(pred_mean_u, dtype=np.float64)
    n = obs_mean_u.size
    if k <= 0:
        raise ValidationError("de_auc_auprc: k must be positive")
    if k >= n:
        raise ValidationError("de_auc_auprc: k must be smaller than the gene count")
    delta_true = np.abs(obs_mean_u - obs_mean_ctrl)
    threshold = np.sort(delta_true)[::-1][k - 1]
    labels = delta_true >= threshold
    scores = np.abs(pred_mean_u - obs_mean_ctrl)
    return auc_exact(labels, scores), auprc_step(labels, scores)


@dataclass
class PerturbMetrics:
    rmse: float
    pseudobulk_r2: float
    mae: float
    delta_pearson: float
    auc_roc: float
    auprc: float
    k: int
    skipped_cells: int = 0

    def as_rows(self) -> dict[str, float]:
        return {
            "rmse": self.rmse,
            "pseudobulk_r2": self.pseudobulk_r2,
            "mae": self.mae,
            "delta_pearson": self.delta_pearson,
            "auc_roc": self.auc_roc,
            "auprc": self.auprc,
        }

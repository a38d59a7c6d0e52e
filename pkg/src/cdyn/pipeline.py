"""Prediction rollouts, the leave-one-out evaluation loop, and the
score-alignment diagnostic.

Prediction encodes cells at a starting time (posterior means), rolls the
transition prior forward sampling innovations, and decodes each step. The
evaluation loop scores each held-out condition's one-step-ahead predictions
with the pseudobulk battery, on all genes and on the fold's DE gene mask, and
reports DE-identification AUC both with labels from the evaluated condition's
own true shifts and with labels from the fold mask. Recovery metrics against
ground-truth latents are computed when a latents_truth directory is present.
"""

from __future__ import annotations

import numpy as np

from .data import FoldSpec, SnapshotDataset, build_loo_folds
from .errors import ValidationError
from .metrics import (
    PerturbMetrics,
    ProbeReport,
    RecoveryReport,
    auc_exact,
    auprc_step,
    de_auc_auprc,
    delta_pearson,
    linear_block_fit,
    mae_condition,
    mcc_nu,
    probe_grounding,
    pseudobulk_r2,
    rmse_condition,
)
from .model import LatentState, ModelParams, decode, encode_invariant, encode_responsive, \
    reparam_sample, transition_prior, transition_score_diff
from .rng import spawn_rng


def rollout(params: ModelParams, x_start: np.ndarray, condition_id: str, t_start: int,
            horizon: int, seed: int) -> dict[int, np.ndarray]:
    """Predicted cell matrices for t_start+1 .. t_start+horizon."""
    if horizon <= 0:
        raise ValidationError("rollout: horizon must be positive")
    q_inv = encode_invariant(params, x_start)
    q_resp = encode_responsive(params, x_start, condition_id, t_start)
    z = LatentState(q_inv.mean, q_resp.mean)
    out: dict[int, np.ndarray] = {}
    for step in range(1, horizon + 1):
        prior_inv, prior_resp = transition_prior(params, z, condition_id)
        rng = spawn_rng(seed, "rollout", condition_id, t_start, step)
        z = LatentState(
            reparam_sample(prior_inv, rng.standard_normal(prior_inv.mean.shape)),
            reparam_sample(prior_resp, rng.standard_normal(prior_resp.mean.shape)),
        )
        out[t_start + step] = decode(params, z)
    return out


def map_condition(params: ModelParams, ds: SnapshotDataset, condition_id: str) -> tuple[str, bool]:
    """Resolve a condition to one with a trained embedding.

    Unseen ids are mapped to the training condition with the largest target
    overlap (ties to the lexicographically smallest id); the flag reports
    whether a fallback happened.
    """
    if condition_id in params.config.conditions:
        return condition_id, False
    if condition_id not in ds.conditions:
        raise ValidationError(f"condition {condition_id!r} is neither trained nor declared "
                              "in the dataset manifest")
    wanted = set(ds.conditions[condition_id].targets)
    best, best_score = None, -1.0
    for cid in sorted(params.config.conditions):
        have = set(ds.conditions[cid].targets) if cid in ds.conditions else set()
        union = wanted | have
        score = len(wanted & have) / len(union) if union else 0.0
        if score > best_score:
            best, best_score = cid, score
    return best, True


def encode_means(params: ModelParams, ds: SnapshotDataset,
                 genes: np.ndarray | None = None) -> dict[tuple[str, int], np.ndarray]:
    """Posterior means (invariant block then responsive block) per (condition, time)."""
    out: dict[tuple[str, int], np.ndarray] = {}
    for cid in ds.condition_ids():
        if cid not in params.config.conditions:
            continue
        for t in ds.times_for(cid):
            rows = ds.group_rows(cid, t)
            x = ds.expression[rows] if genes is None else ds.expression[rows][:, genes]
            q_inv = encode_invariant(params, x)
            q_resp = encode_responsive(params, x, cid, min(t, params.config.horizon))
            out[(cid, t)] = np.concatenate([q_inv.mean, q_resp.mean], axis=1)
    return out


def recovery_metrics(params: ModelParams, ds: SnapshotDataset,
                     truth: dict[tuple[str, int], np.ndarray], seed: int,
                     probe_epochs: int = 500,
                     probe_max_rows: int = 5000) -> tuple[RecoveryReport, ProbeReport]:
    encoded = encode_means(params, ds)
    keys = sorted(encoded.keys())
    z_hat = np.concatenate([encoded[k] for k in keys], axis=0)
    z_true = np.concatenate([truth[k] for k in keys], axis=0)
    d_inv = params.config.d_inv
    mcc, assignment = mcc_nu(z_hat[:, d_inv:], z_true[:, d_inv:])
    lin = linear_block_fit(z_hat[:, :d_inv], z_true[:, :d_inv], split_seed=seed)
    probe = probe_grounding(z_hat, z_true, split_seed=seed, epochs=probe_epochs,
                            max_rows=probe_max_rows)
    recovery = RecoveryReport(mcc, assignment, lin.r2, lin.degenerate)
    return recovery, probe


def _paired_rows(n_pred: int, n_obs: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = spawn_rng(seed, "eval-pairing")
    m = min(n_pred, n_obs)
    return rng.permutation(n_pred)[:m], rng.permutation(n_obs)[:m]


def evaluate_fold(params: ModelParams, ds: SnapshotDataset, fold: FoldSpec, k_top: int,
                  seed: int, predictions: dict[int, np.ndarray] | None = None) -> dict:
    """Metric battery for one held-out condition, pooled over its timepoints."""
    ctrl = ds.control_id
    held = fold.held_out
    model_cid, mapped = (held, False) if predictions is not None else \
        map_condition(params, ds, held)
    genes = fold.hvg
    times = ds.times_for(held)
    eval_times = [t for t in times[1:] if (t - 1) in times]
    if not eval_times:
        raise ValidationError(f"fold {held}: no consecutive timepoints to evaluate")

    pred_cells: dict[int, np.ndarray] = {}
    for t in eval_times:
        if predictions is not None:
            if t not in predictions:
                raise ValidationError(f"fold {held}: missing supplied predictions at t={t}")
            pred_cells[t] = predictions[t][:, genes] if predictions[t].shape[1] == ds.n_genes \
                else predictions[t]
        else:
            rows_prev = ds.group_rows(held, t - 1)
            x_prev = ds.expression[rows_prev][:, genes]
            pred_cells[t] = rollout(params, x_prev, model_cid, t - 1, 1,
                                    seed=int(spawn_rng(seed, "fold", held, t).integers(2 ** 31)))[t]

    pred_means, obs_means, ctrl_means = [], [], []
    per_time: dict[str, dict] = {}
    dp_all_vals, dp_de_vals = [], []
    auc_self_vals, auprc_self_vals = [], []
    auc_mask_vals, auprc_mask_vals = [], []
    skipped_total = 0
    for t in eval_times:
        obs_rows = ds.group_rows(held, t)
        obs = ds.expression[obs_rows][:, genes]
        ctrl_mean = ds.pseudobulk(ctrl, t, genes)
        pred = pred_cells[t]
        pm, om = pred.mean(axis=0), obs.mean(axis=0)
        pred_means.append(pm)
        obs_means.append(om)
        ctrl_means.append(ctrl_mean)

        sel_pred, sel_obs = _paired_rows(pred.shape[0], obs.shape[0],
                                         int(spawn_rng(seed, "pairing", held, t).integers(2 ** 31)))
        if predictions is not None and pred.shape[0] == obs.shape[0]:
            sel_pred = sel_obs = np.arange(obs.shape[0])
        dp_all, sk_a = delta_pearson(pred[sel_pred], obs[sel_obs], ctrl_mean)
        dp_de, sk_d = delta_pearson(pred[sel_pred], obs[sel_obs], ctrl_mean,
                                    gene_mask=fold.de_mask)
        skipped_total += sk_a + sk_d
        dp_all_vals.append(dp_all)
        dp_de_vals.append(dp_de)

        auc_s, auprc_s = de_auc_auprc(om, ctrl_mean, pm, k=min(k_top, len(genes) - 1))
        auc_self_vals.append(auc_s)
        auprc_self_vals.append(auprc_s)
        if fold.de_mask.any() and not fold.de_mask.all():
            scores = np.abs(pm - ctrl_mean)
            auc_mask_vals.append(auc_exact(fold.de_mask, scores))
            auprc_mask_vals.append(auprc_step(fold.de_mask, scores))
        per_time[str(t)] = {
            "pseudobulk_r2": None,  # needs pooling; per-time r2 is degenerate with one condition
            "mae": mae_condition(pm, om, ctrl_mean),
            "rmse": rmse_condition(pm, om, ctrl_mean),
            "delta_pearson": dp_all,
            "auc_roc": auc_s,
            "auprc": auprc_s,
        }

    pred_means = np.stack(pred_means)
    obs_means = np.stack(obs_means)
    ctrl_means = np.stack(ctrl_means)
    metrics = PerturbMetrics(
        rmse=rmse_condition(pred_means, obs_means, ctrl_means),
        pseudobulk_r2=pseudobulk_r2(pred_means, obs_means),
        mae=mae_condition(pred_means, obs_means, ctrl_means),
        delta_pearson=float(np.mean(dp_all_vals)),
        auc_roc=float(np.mean(auc_self_vals)),
        auprc=float(np.mean(auprc_self_vals)),
        k=k_top,
        skipped_cells=skipped_total,
    )
    row = {"held_out": held, "mapped_condition": model_cid if mapped else None}
    row.update({f"{name}_all": val for name, val in metrics.as_rows().items()})
    row["delta_pearson_de"] = float(np.mean(dp_de_vals))
    row["auc_roc_self"] = metrics.auc_roc
    row["auprc_self"] = metrics.auprc
    row["auc_roc_de_mask"] = float(np.mean(auc_mask_vals)) if auc_mask_vals else 0.0
    row["auprc_de_mask"] = float(np.mean(auprc_mask_vals)) if auprc_mask_vals else 0.0
    row["skipped_cells"] = skipped_total
    row["per_time"] = per_time
    return row


METRIC_COLUMNS = [
    "rmse_all", "pseudobulk_r2_all", "mae_all", "delta_pearson_all",
    "auc_roc_all", "auprc_all", "delta_pearson_de",
    "auc_roc_self", "auprc_self", "auc_roc_de_mask", "auprc_de_mask",
]


def evaluate_loo(params: ModelParams, ds: SnapshotDataset, k_top: int, seed: int,
                 hvg_k: int = 0, max_folds: int | None = None,
                 truth: dict[tuple[str, int], np.ndarray] | None = None,
                 probe_epochs: int = 500, probe_max_rows: int = 5000,
                 predictions: dict[str, dict[int, np.ndarray]] | None = None) -> dict:
    folds = build_loo_folds(ds, k_top, hvg_k=hvg_k)
    if max_folds is not None:
        folds = folds[:max_folds]
    fold_rows = [
        evaluate_fold(params, ds, fold, k_top, seed,
                      predictions=predictions.get(fold.held_out) if predictions else None)
        for fold in folds
    ]
    report = {"k": k_top, "n_folds": len(fold_rows), "folds": fold_rows}
    if truth is not None:
        recovery, probe = recovery_metrics(params, ds, truth, seed,
                                           probe_epochs=probe_epochs,
                                           probe_max_rows=probe_max_rows)
        report["recovery"] = {
            "mcc_nu": recovery.mcc_nu,
            "assignment": recovery.assignment,
            "linear_r2_inv": recovery.linear_r2_inv,
            "degenerate": recovery.degenerate,
            "probe_r2_per_factor": probe.r2_per_factor,
            "probe_r2_mean": probe.r2_mean,
            "probe_spearman_per_factor": probe.spearman_per_factor,
            "probe_spearman_mean": probe.spearman_mean,
        }
    else:
        report["recovery"] = None
    return report


def metrics_csv_lines(report: dict) -> list[str]:
    lines = ["fold,metric,value"]
    for row in report["folds"]:
        for metric in METRIC_COLUMNS:
            lines.append(f"{row['held_out']},{metric},{repr(float(row[metric]))}")
    return lines


def diagnose_score_alignment(params: ModelParams, ds: SnapshotDataset, seed: int,
                             n_samples: int = 256) -> dict:
    """Mean norms of the score-difference blocks per non-baseline environment."""
    ctrl = ds.control_id
    others = [c for c in ds.condition_ids() if c != ctrl and c in params.config.conditions]
    if not others:
        raise ValidationError("diagnose: need at least one non-baseline environment")
    d_inv = params.config.d_inv
    entries = []
    all_inv, all_resp = [], []
    for cid in others:
        times = ds.times_for(cid)
        norms_inv, norms_resp = [], []
        for t in times[1:]:
            if (t - 1) not in times:
                continue
            rng = spawn_rng(seed, "diagnose", cid, t)
            rows_prev = ds.group_rows(cid, t - 1)
            rows_curr = ds.group_rows(cid, t)
            take = min(n_samples, rows_prev.size, rows_curr.size)
            sel_prev = rng.choice(rows_prev, take, replace=False)
            sel_curr = rng.choice(rows_curr, take, replace=False)
            t_prev_clamped = min(t - 1, params.config.horizon)
            t_clamped = min(t, params.config.horizon)
            x_prev, x_curr = ds.expression[sel_prev], ds.expression[sel_curr]
            z_prev = LatentState(encode_invariant(params, x_prev).mean,
                                 encode_responsive(params, x_prev, cid, t_prev_clamped).mean)
            z_curr = LatentState(encode_invariant(params, x_curr).mean,
                                 encode_responsive(params, x_curr, cid, t_clamped).mean)
            blk_inv, blk_resp = transition_score_diff(params, z_curr, z_prev, cid, ctrl)
            norms_inv.extend(np.linalg.norm(blk_inv, axis=1).tolist())
            norms_resp.extend(np.linalg.norm(blk_resp, axis=1).tolist())
        mean_inv = float(np.mean(norms_inv))
        mean_resp = float(np.mean(norms_resp))
        entries.append({"environment": cid, "mean_norm_inv": mean_inv,
                        "mean_norm_resp": mean_resp,
                        "ratio": mean_inv / mean_resp if mean_resp > 0 else float("inf")})
        all_inv.extend(norms_inv)
        all_resp.extend(norms_resp)
    overall_inv = float(np.mean(all_inv))
    overall_resp = float(np.mean(all_resp))
    return {
        "baseline": ctrl,
        "environments": entries,
        "overall_mean_norm_inv": overall_inv,
        "overall_mean_norm_resp": overall_resp,
        "overall_ratio": overall_inv / overall_resp if overall_resp > 0 else float("inf"),
        "d_inv": d_inv,
    }

"""Training objective: temporal ELBO, invariant alignment, adjacency sparsity,
and their weighted total (minimized as -elbo + lam_align*align + lam_reg*reg).

Losses are batch means, so the lambda weights are batch-size independent.
The sparsity term sums the entrywise L1 of the gate matrix over the distinct
condition ids present in the step. All terms are pure functions of
(params, batches, seed) and the whole objective is differentiated through one
tape, which is what cmd_gradcheck exercises end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .model import (
    GaussianDiag,
    ModelParams,
    cond_row_graph,
    adjacency_graph,
    declare_params,
    decoder_graph,
    encoder_inv_graph,
    encoder_resp_graph,
    kl_graph,
    transition_prior_graph,
)
from .rng import spawn_rng
from .tape import Tape


@dataclass
class PairBatch:
    """Pseudo-paired consecutive snapshots: row i of x_prev precedes row i of x_curr."""
    x_prev: np.ndarray
    x_curr: np.ndarray
    condition_id: str
    t_curr: int

    def __post_init__(self) -> None:
        self.x_prev = np.asarray(self.x_prev, dtype=np.float64)
        self.x_curr = np.asarray(self.x_curr, dtype=np.float64)
        if self.x_prev.ndim != 2 or self.x_prev.shape != self.x_curr.shape:
            raise ValidationError("PairBatch: x_prev and x_curr must be matrices of equal shape")
        if self.x_prev.shape[0] < 1:
            raise ValidationError("PairBatch: empty batch")
        if self.t_curr < 1:
            raise ValidationError("PairBatch: t_curr must be >= 1")


@dataclass
class AlignBatch:
    """Cross-condition pairs at a fixed time: row i of x_pert pairs with row i of x_ctrl."""
    x_pert: np.ndarray
    x_ctrl: np.ndarray
    condition_id: str
    t: int

    def __post_init__(self) -> None:
        self.x_pert = np.asarray(self.x_pert, dtype=np.float64)
        self.x_ctrl = np.asarray(self.x_ctrl, dtype=np.float64)
        if self.x_pert.ndim != 2 or self.x_pert.shape != self.x_ctrl.shape:
            raise ValidationError("AlignBatch: x_pert and x_ctrl must be matrices of equal shape")
        if self.x_pert.shape[0] < 1:
            raise ValidationError("AlignBatch: empty batch")


@dataclass
class LossReport:
    total: float
    neg_elbo: float
    recon_prev: float
    recon_curr: float
    kl_transition: float
    align: float
    sparsity: float
    kl_prior0: float = 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "neg_elbo": self.neg_elbo,
            "recon_prev": self.recon_prev,
            "recon_curr": self.recon_curr,
            "kl_transition": self.kl_transition,
            "align": self.align,
            "sparsity": self.sparsity,
            "kl_prior0": self.kl_prior0,
        }


def _draw_noise(batch: PairBatch, config, seed: int) -> tuple[np.ndarray, np.ndarray]:
    b = batch.x_prev.shape[0]
    d = config.d_inv + config.d_resp
    rng = spawn_rng(seed, "elbo-noise", batch.condition_id, batch.t_curr)
    return rng.standard_normal((b, d)), rng.standard_normal((b, d))


def _recon_graph(tape: Tape, x_const: int, x_hat: int, batch_size: int) -> int:
    # unit-variance Gaussian likelihood, additive constant dropped
    return tape.scale(tape.sum(tape.square(tape.sub(x_const, x_hat))), -0.5 / batch_size)


def _posterior_graph(tape: Tape, pn, config, x: np.ndarray, cond_row: int, t: int):
    x_const = tape.constant(x)
    mean_inv, logvar_inv = encoder_inv_graph(tape, pn, x_const, config)
    mean_resp, logvar_resp = encoder_resp_graph(
        tape, pn, x_const, cond_row, t / config.horizon, config)
    return x_const, (mean_inv, logvar_inv), (mean_resp, logvar_resp)


def _sample_graph(tape: Tape, mean: int, logvar: int, noise: np.ndarray) -> int:
    eps = tape.constant(noise)
    return tape.add(mean, tape.mul(tape.exp(tape.scale(logvar, 0.5)), eps))


def _std_normal_kl_graph(tape: Tape, mean: int, logvar: int) -> int:
    zero = tape.constant(np.zeros((1, 1)))
    return kl_graph(tape, mean, logvar, zero, zero)


def _objective_graph(tape: Tape, pn, params: ModelParams, pair: PairBatch,
                     align: AlignBatch | None, noise: tuple[np.ndarray, np.ndarray],
                     sparsity_ids: Sequence[str], lam_prior0: float) -> dict[str, int]:
    config = params.config
    b = pair.x_prev.shape[0]
    cond_idx = config.cond_index(pair.condition_id)
    cond_row = cond_row_graph(tape, pn, cond_idx, config)

    x_prev_c, (mi_p, li_p), (mr_p, lr_p) = _posterior_graph(
        tape, pn, config, pair.x_prev, cond_row, pair.t_curr - 1)
    x_curr_c, (mi_c, li_c), (mr_c, lr_c) = _posterior_graph(
        tape, pn, config, pair.x_curr, cond_row, pair.t_curr)

    noise_prev, noise_curr = noise
    z_prev_inv = _sample_graph(tape, mi_p, li_p, noise_prev[:, :config.d_inv])
    z_prev_resp = _sample_graph(tape, mr_p, lr_p, noise_prev[:, config.d_inv:])
    z_curr_inv = _sample_graph(tape, mi_c, li_c, noise_curr[:, :config.d_inv])
    z_curr_resp = _sample_graph(tape, mr_c, lr_c, noise_curr[:, config.d_inv:])

    recon_prev = _recon_graph(
        tape, x_prev_c, decoder_graph(tape, pn, tape.concat([z_prev_inv, z_prev_resp], axis=1)), b)
    recon_curr = _recon_graph(
        tape, x_curr_c, decoder_graph(tape, pn, tape.concat([z_curr_inv, z_curr_resp], axis=1)), b)

    pm_i, pl_i, pm_r, pl_r = transition_prior_graph(
        tape, pn, z_prev_inv, z_prev_resp, cond_row, config)
    kl_elem = tape.concat(
        [kl_graph(tape, mi_c, li_c, pm_i, pl_i), kl_graph(tape, mr_c, lr_c, pm_r, pl_r)], axis=1)
    kl_transition = tape.scale(tape.sum(kl_elem), 1.0 / b)

    elbo = tape.sub(tape.add(recon_prev, recon_curr), kl_transition)
    kl_prior0 = None
    if lam_prior0 != 0.0:
        prior0 = tape.concat(
            [_std_normal_kl_graph(tape, mi_p, li_p), _std_normal_kl_graph(tape, mr_p, lr_p)], axis=1)
        kl_prior0 = tape.scale(tape.sum(prior0), 1.0 / b)
        elbo = tape.sub(elbo, tape.scale(kl_prior0, lam_prior0))

    nodes = {
        "elbo": elbo,
        "recon_prev": recon_prev,
        "recon_curr": recon_curr,
        "kl_transition": kl_transition,
    }
    if kl_prior0 is not None:
        nodes["kl_prior0"] = kl_prior0

    if align is not None:
        mu_pert, _ = encoder_inv_graph(tape, pn, tape.constant(align.x_pert), config)
        mu_ctrl, _ = encoder_inv_graph(tape, pn, tape.constant(align.x_ctrl), config)
        nodes["align"] = tape.scale(
            tape.sum(tape.square(tape.sub(mu_pert, mu_ctrl))), 1.0 / align.x_pert.shape[0])

    if sparsity_ids:
        terms = []
        for cid in sparsity_ids:
            row = cond_row_graph(tape, pn, config.cond_index(cid), config)
            terms.append(tape.sum(tape.abs(adjacency_graph(tape, pn, row, config))))
        total = terms[0]
        for term in terms[1:]:
            total = tape.add(total, term)
        nodes["sparsity"] = total
    return nodes


def _distinct_ids(pair: PairBatch, align: AlignBatch | None, control_id: str | None) -> list[str]:
    ids = [pair.condition_id]
    if align is not None and control_id is not None and control_id not in ids:
        ids.append(control_id)
    return ids


def build_total_loss_tape(params: ModelParams, pair: PairBatch, align: AlignBatch | None,
                          lam_align: float, lam_reg: float, seed: int,
                          noise: tuple[np.ndarray, np.ndarray] | None = None,
                          control_id: str | None = None,
                          lam_prior0: float = 0.0) -> tuple[Tape, dict[str, int]]:
    if align is not None and align.condition_id != pair.condition_id:
        raise ValidationError("total_loss: pair and align batches carry different condition ids")
    if noise is None:
        noise = _draw_noise(pair, params.config, seed)
    tape = Tape()
    pn = declare_params(tape, params)
    nodes = _objective_graph(tape, pn, params, pair, align, noise,
                             _distinct_ids(pair, align, control_id), lam_prior0)
    neg_elbo = tape.neg(nodes["elbo"])
    total = neg_elbo
    if "align" in nodes:
        total = tape.add(total, tape.scale(nodes["align"], lam_align))
    total = tape.add(total, tape.scale(nodes["sparsity"], lam_reg))
    nodes["neg_elbo"] = neg_elbo
    nodes["total"] = total
    tape.mark_loss(total)
    return tape, nodes


def _report_from(tape: Tape, nodes: dict[str, int]) -> LossReport:
    def val(name: str) -> float:
        return float(tape.value(nodes[name])[0, 0]) if name in nodes else 0.0

    return LossReport(
        total=val("total"),
        neg_elbo=val("neg_elbo"),
        recon_prev=val("recon_prev"),
        recon_curr=val("recon_curr"),
        kl_transition=val("kl_transition"),
        align=val("align"),
        sparsity=val("sparsity"),
        kl_prior0=val("kl_prior0"),
    )


def build_recon_warmstart_tape(params: ModelParams, pair: PairBatch,
                               align: AlignBatch | None = None,
                               lam_align: float = 0.0, lam_reg: float = 0.0,
                               control_id: str | None = None,
                               prior_weight: float = 1.0) -> Tape:
    """Deterministic warm start: the full objective evaluated on posterior
    means, with the transition prior's negative log-density in place of the KL.

    Keeping the prior gradients flowing into the encoders steers the code
    toward coordinates the gated factorized transition can express, and the
    sparsity term then prefers codes matching a sparse gate pattern. Prior
    log-variances are softly bounded below so a degenerate code cannot drive
    the density to infinity.
    """
    config = params.config
    b = pair.x_prev.shape[0]
    tape = Tape()
    pn = declare_params(tape, params)
    cond_row = cond_row_graph(tape, pn, config.cond_index(pair.condition_id), config)
    total = None
    means = []
    for x, t in ((pair.x_prev, pair.t_curr - 1), (pair.x_curr, pair.t_curr)):
        x_const = tape.constant(x)
        mean_inv, _ = encoder_inv_graph(tape, pn, x_const, config)
        mean_resp, _ = encoder_resp_graph(tape, pn, x_const, cond_row, t / config.horizon, config)
        means.append((mean_inv, mean_resp))
        x_hat = decoder_graph(tape, pn, tape.concat([mean_inv, mean_resp], axis=1))
        term = tape.scale(tape.sum(tape.square(tape.sub(x_const, x_hat))), 0.5 / b)
        total = term if total is None else tape.add(total, term)

    if prior_weight > 0.0:
        (zp_inv, zp_resp), (zc_inv, zc_resp) = means
        pm_i, pl_i, pm_r, pl_r = transition_prior_graph(tape, pn, zp_inv, zp_resp,
                                                        cond_row, config)
        floor = tape.constant([[-4.0]])
        for target, mean, logvar in ((zc_inv, pm_i, pl_i), (zc_resp, pm_r, pl_r)):
            bounded = tape.add(floor, tape.softplus(tape.sub(logvar, floor)))
            resid = tape.sub(target, mean)
            nll = tape.add(tape.mul(tape.square(resid), tape.exp(tape.neg(bounded))), bounded)
            total = tape.add(total, tape.scale(tape.sum(nll), 0.5 * prior_weight / b))

    if align is not None and lam_align > 0.0:
        mu_pert, _ = encoder_inv_graph(tape, pn, tape.constant(align.x_pert), config)
        mu_ctrl, _ = encoder_inv_graph(tape, pn, tape.constant(align.x_ctrl), config)
        align_node = tape.scale(tape.sum(tape.square(tape.sub(mu_pert, mu_ctrl))),
                                1.0 / align.x_pert.shape[0])
        total = tape.add(total, tape.scale(align_node, lam_align))

    if lam_reg > 0.0:
        terms = []
        for cid in _distinct_ids(pair, align, control_id):
            row = cond_row_graph(tape, pn, config.cond_index(cid), config)
            terms.append(tape.sum(tape.abs(adjacency_graph(tape, pn, row, config))))
        sparsity = terms[0]
        for term in terms[1:]:
            sparsity = tape.add(sparsity, term)
        total = tape.add(total, tape.scale(sparsity, lam_reg))
    tape.mark_loss(total)
    return tape


def build_prior_warmstart_tape(params: ModelParams, z_prev: np.ndarray,
                               z_curr: np.ndarray, condition_id: str) -> Tape:
    """Negative log-density of encoded transitions under the prior.

    Both latents enter as constants, so only the transition heads (and the
    gate parameters) receive gradients; paired with the autoencoding warm
    start this teaches the priors to track the code they will regularize.
    """
    config = params.config
    b = z_prev.shape[0]
    tape = Tape()
    pn = declare_params(tape, params)
    cond_row = cond_row_graph(tape, pn, config.cond_index(condition_id), config)
    zp_inv = tape.constant(z_prev[:, :config.d_inv])
    zp_resp = tape.constant(z_prev[:, config.d_inv:])
    pm_i, pl_i, pm_r, pl_r = transition_prior_graph(tape, pn, zp_inv, zp_resp, cond_row, config)
    total = None
    for target, mean, logvar in ((z_curr[:, :config.d_inv], pm_i, pl_i),
                                 (z_curr[:, config.d_inv:], pm_r, pl_r)):
        resid = tape.sub(tape.constant(target), mean)
        nll = tape.add(tape.mul(tape.square(resid), tape.exp(tape.neg(logvar))), logvar)
        term = tape.scale(tape.sum(nll), 0.5 / b)
        total = term if total is None else tape.add(total, term)
    tape.mark_loss(total)
    return tape


def temporal_elbo(params: ModelParams, batch: PairBatch, seed: int,
                  noise: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[float, dict[str, float]]:
    tape, nodes = build_total_loss_tape(params, batch, None, 0.0, 0.0, seed, noise=noise)
    tape.forward(params.flatten())
    breakdown = {
        "recon_prev": float(tape.value(nodes["recon_prev"])[0, 0]),
        "recon_curr": float(tape.value(nodes["recon_curr"])[0, 0]),
        "kl_transition": float(tape.value(nodes["kl_transition"])[0, 0]),
    }
    return float(tape.value(nodes["elbo"])[0, 0]), breakdown


def alignment_loss(params: ModelParams, batch: AlignBatch) -> float:
    tape = Tape()
    pn = declare_params(tape, params)
    config = params.config
    mu_pert, _ = encoder_inv_graph(tape, pn, tape.constant(batch.x_pert), config)
    mu_ctrl, _ = encoder_inv_graph(tape, pn, tape.constant(batch.x_ctrl), config)
    loss = tape.scale(tape.sum(tape.square(tape.sub(mu_pert, mu_ctrl))),
                      1.0 / batch.x_pert.shape[0])
    tape.mark_loss(loss)
    tape.forward(params.flatten())
    return float(tape.value(loss)[0, 0])


def sparsity_loss(params: ModelParams, condition_ids: Sequence[str]) -> float:
    distinct: list[str] = []
    for cid in condition_ids:
        if cid not in distinct:
            distinct.append(cid)
    total = 0.0
    for cid in distinct:
        tape = Tape()
        pn = declare_params(tape, params)
        row = cond_row_graph(tape, pn, params.config.cond_index(cid), params.config)
        node = tape.sum(tape.abs(adjacency_graph(tape, pn, row, params.config)))
        tape.mark_loss(node)
        total += tape.forward(params.flatten())
    return total


def total_loss(params: ModelParams, pair: PairBatch, align: AlignBatch | None,
               lam_align: float, lam_reg: float, seed: int,
               noise: tuple[np.ndarray, np.ndarray] | None = None,
               control_id: str | None = None, lam_prior0: float = 0.0) -> LossReport:
    tape, nodes = build_total_loss_tape(params, pair, align, lam_align, lam_reg, seed,
                                        noise=noise, control_id=control_id,
                                        lam_prior0=lam_prior0)
    tape.forward(params.flatten())
    return _report_from(tape, nodes)


def total_loss_and_grad(params: ModelParams, pair: PairBatch, align: AlignBatch | None,
                        lam_align: float, lam_reg: float, seed: int,
                        noise: tuple[np.ndarray, np.ndarray] | None = None,
                        control_id: str | None = None,
                        lam_prior0: float = 0.0) -> tuple[LossReport, np.ndarray]:
    tape, nodes = build_total_loss_tape(params, pair, align, lam_align, lam_reg, seed,
                                        noise=noise, control_id=control_id,
                                        lam_prior0=lam_prior0)
    tape.forward(params.flatten())
    return _report_from(tape, nodes), tape.backward()

"""Training loop: one optimizer step per coupled mini-batch.

Each step draws a pseudo-paired temporal batch for one (condition, t -> t+1)
plus, for non-control conditions, a cross-condition alignment batch at the
current time, then minimizes
    -elbo + lam_align * align + lam_reg * sparsity
with Adam. Ablation flags zero the corresponding weight. Per-step LossReport
lines go to the provided sink as JSON-serializable dicts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import BatchSampler, RunConfig, SnapshotDataset
from .errors import ComputeError
from .losses import build_recon_warmstart_tape, total_loss_and_grad
from .model import ModelConfig, ModelParams, init_model_params
from .rng import spawn_rng
from .tape import AdamState, adam_step

ABLATION_CHOICES = ("none", "alignment", "sparsity", "both")


@dataclass
class TrainResult:
    params: ModelParams
    steps: int
    final_total: float


def effective_lambdas(config: RunConfig, ablate: str) -> tuple[float, float]:
    lam_align = 0.0 if ablate in ("alignment", "both") else config.training.lam_align
    lam_reg = 0.0 if ablate in ("sparsity", "both") else config.training.lam_reg
    return lam_align, lam_reg


def train_model(ds: SnapshotDataset, config: RunConfig, ablate: str = "none",
                log_sink: Callable[[dict], None] | None = None,
                training_conditions: list[str] | None = None,
                genes: np.ndarray | None = None) -> TrainResult:
    if ablate not in ABLATION_CHOICES:
        raise ComputeError(f"unknown ablation {ablate!r}")
    lam_align, lam_reg = effective_lambdas(config, ablate)
    tr = config.training
    conditions = training_conditions if training_conditions is not None else ds.condition_ids()
    n_genes = ds.n_genes if genes is None else len(genes)
    times = sorted({int(t) for t in ds.time})
    model_config = ModelConfig(
        d_inv=config.model.d_inv,
        d_resp=config.model.d_resp,
        n_genes=n_genes,
        d_cond=config.model.d_cond,
        d_target=config.model.d_target,
        hidden=config.model.hidden,
        horizon=max(times),
        conditions=list(conditions),
    )
    params = init_model_params(model_config, config.seed)
    flat = params.flatten()
    state = AdamState.init(flat.size, lr=tr.lr)
    control = ds.control_id

    sampler = BatchSampler(ds, conditions, tr.coupling, tr.batch_size, config.seed,
                           crossfit_mode=tr.crossfit,
                           sinkhorn_max_cells=tr.sinkhorn_max_cells, genes=genes,
                           batches_per_pair=tr.batches_per_pair)
    warmstart_epochs = int(tr.warmstart_frac * tr.epochs)
    ramp_epochs = int(tr.align_warmup_frac * tr.epochs)
    sparsity_start = int(tr.sparsity_delay_frac * tr.epochs)
    step = 0
    last_total = float("nan")
    for epoch in range(tr.epochs):
        if tr.lr_decay != 1.0 and tr.epochs > 1:
            frac = epoch / (tr.epochs - 1)
            state.lr = tr.lr * ((1.0 - frac) + frac * tr.lr_decay)
        warmstart = epoch < warmstart_epochs
        # the alignment weight ramps in over the early epochs so reconstruction
        # populates the invariant coordinates before alignment fully engages
        lam_align_now = lam_align
        if ramp_epochs > 0 and epoch < ramp_epochs:
            lam_align_now = lam_align * (epoch + 1) / ramp_epochs
        lam_reg_now = lam_reg if epoch >= sparsity_start else 0.0
        batches, _ = sampler.epoch(epoch)
        for pair, align in batches:
            step += 1
            live = params.with_flat(flat)
            if warmstart:
                tape = build_recon_warmstart_tape(live, pair, align, lam_align_now,
                                                  lam_reg, control_id=control)
                loss = tape.forward(flat)
                grad = tape.backward()
                report = None
                last_total = loss
            else:
                step_seed = int(spawn_rng(config.seed, "step", epoch, pair.condition_id,
                                          pair.t_curr).integers(2 ** 31))
                report, grad = total_loss_and_grad(
                    live, pair, align, lam_align_now, lam_reg_now, step_seed,
                    control_id=control, lam_prior0=tr.lam_prior0)
                last_total = report.total
            try:
                flat, state = adam_step(state, flat, grad)
            except ComputeError as exc:
                raise ComputeError(f"step {step}: {exc}") from exc
            if log_sink is not None:
                entry = {"step": step, "epoch": epoch, "condition": pair.condition_id,
                         "t": pair.t_curr, "phase": "warmstart" if warmstart else "full"}
                entry.update(report.to_dict() if report is not None
                             else {"total": last_total})
                log_sink(entry)
    return TrainResult(params.with_flat(flat), step, last_total)

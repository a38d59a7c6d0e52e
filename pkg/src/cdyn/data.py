"""Dataset formats, preprocessing, fold construction, and run configuration.

On disk a dataset is a directory holding snapshot.csv (header
cell_id,condition,time,<genes...>) plus a conditions.json manifest
{"mode": "counts"|"normalized", "conditions": {id: {"targets": [...],
"is_control": bool}}}, optionally latents_truth/<cond>_t<T>.csv files with
ground-truth latents row-aligned to the snapshot rows of that group.

Fold artifacts (HVG list, DE gene mask) are functions of training cells only;
held-out cells never enter them. An optional compact binary mirror (magic
"CDYN1", little-endian float64, row-major) is provided for large matrices.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .coupling import default_sinkhorn_eps, independent_coupling, sinkhorn_coupling
from .errors import ValidationError
from .losses import AlignBatch, PairBatch
from .rng import spawn_rng

MAGIC = b"CDYN1"


@dataclass
class CondInfo:
    targets: list[str]
    is_control: bool


@dataclass
class SnapshotDataset:
    expression: np.ndarray
    condition: list[str]
    time: np.ndarray
    genes: list[str]
    conditions: dict[str, CondInfo]
    mode: str
    cell_ids: list[str]
    norm_dropped_cells: int = 0
    paired: bool = False  # row i means the same trajectory in every (condition, time) group

    def __post_init__(self) -> None:
        self.expression = np.asarray(self.expression, dtype=np.float64)
        self.time = np.asarray(self.time, dtype=np.int64)
        n = self.expression.shape[0]
        if len(self.condition) != n or self.time.size != n or len(self.cell_ids) != n:
            raise ValidationError("SnapshotDataset: row annotations do not match matrix")
        if len(set(self.genes)) != len(self.genes):
            raise ValidationError("SnapshotDataset: duplicate gene names")
        controls = [cid for cid, info in self.conditions.items() if info.is_control]
        if len(controls) != 1:
            raise ValidationError(f"SnapshotDataset: exactly one control required, got {controls}")
        if self.mode not in ("counts", "normalized"):
            raise ValidationError(f"SnapshotDataset: unknown mode {self.mode!r}")
        for i, cid in enumerate(self.condition):
            if cid not in self.conditions:
                raise ValidationError(f"row {i} ({self.cell_ids[i]}): condition {cid!r} "
                                      "not listed in the manifest")
        if self.mode == "counts" and np.any(self.expression < 0):
            raise ValidationError("SnapshotDataset: negative expression in count mode")

    @property
    def control_id(self) -> str:
        return next(cid for cid, info in self.conditions.items() if info.is_control)

    @property
    def n_genes(self) -> int:
        return self.expression.shape[1]

    def condition_ids(self) -> list[str]:
        """Manifest order, control first."""
        ids = sorted(self.conditions.keys())
        ctrl = self.control_id
        return [ctrl] + [c for c in ids if c != ctrl]

    def _groups(self) -> dict[tuple[str, int], np.ndarray]:
        cache = getattr(self, "_group_cache", None)
        if cache is None:
            cache = {}
            cond = np.asarray(self.condition)
            for cid in self.conditions:
                where = np.flatnonzero(cond == cid)
                for t in np.unique(self.time[where]):
                    cache[(cid, int(t))] = where[self.time[where] == t]
            object.__setattr__(self, "_group_cache", cache)
        return cache

    def group_rows(self, cond_id: str, t: int) -> np.ndarray:
        return self._groups().get((cond_id, int(t)), np.empty(0, dtype=np.int64))

    def times_for(self, cond_id: str) -> list[int]:
        return sorted(t for cid, t in self._groups() if cid == cond_id)

    def pseudobulk(self, cond_id: str, t: int, genes: np.ndarray | None = None) -> np.ndarray:
        rows = self.group_rows(cond_id, t)
        if rows.size == 0:
            raise ValidationError(f"no cells for condition {cond_id!r} at t={t}")
        block = self.expression[rows]
        if genes is not None:
            block = block[:, genes]
        return block.mean(axis=0)


def save_snapshot_table(out_dir: str | Path, expression: np.ndarray, condition: list[str],
                        time: list[int], genes: list[str], conditions: dict,
                        mode: str, cell_ids: list[str] | None = None,
                        paired: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    expression = np.asarray(expression, dtype=np.float64)
    n = expression.shape[0]
    if cell_ids is None:
        cell_ids = [f"c{i:07d}" for i in range(n)]
    header = "cell_id,condition,time," + ",".join(genes)
    lines = [header]
    for i in range(n):
        vals = ",".join(repr(float(v)) for v in expression[i])
        lines.append(f"{cell_ids[i]},{condition[i]},{int(time[i])},{vals}")
    (out / "snapshot.csv").write_text("\n".join(lines) + "\n")
    manifest = {"mode": mode, "paired": paired, "conditions": {
        cid: (asdict(info) if isinstance(info, CondInfo) else info)
        for cid, info in conditions.items()
    }}
    (out / "conditions.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def save_dataset(ds: SnapshotDataset, out_dir: str | Path) -> None:
    save_snapshot_table(out_dir, ds.expression, ds.condition, ds.time.tolist(), ds.genes,
                        {cid: asdict(info) for cid, info in ds.conditions.items()},
                        ds.mode, cell_ids=ds.cell_ids, paired=ds.paired)


def load_snapshot_table(path: str | Path) -> SnapshotDataset:
    base = Path(path)
    csv_path = base / "snapshot.csv" if base.is_dir() else base
    manifest_path = csv_path.parent / "conditions.json"
    if not csv_path.exists():
        raise ValidationError(f"snapshot table not found at {csv_path}")
    if not manifest_path.exists():
        raise ValidationError(f"conditions manifest not found at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if "conditions" not in manifest:
        raise ValidationError("conditions.json must carry a 'conditions' mapping")
    conditions = {cid: CondInfo(info.get("targets", []), bool(info.get("is_control", False)))
                  for cid, info in manifest["conditions"].items()}
    frame = pd.read_csv(csv_path, float_precision="round_trip")
    required = ["cell_id", "condition", "time"]
    if list(frame.columns[:3]) != required:
        raise ValidationError(f"snapshot header must start with {required}")
    genes = list(frame.columns[3:])
    expression = frame[genes].to_numpy(dtype=np.float64)
    return SnapshotDataset(
        expression=expression,
        condition=[str(c) for c in frame["condition"].tolist()],
        time=frame["time"].to_numpy(dtype=np.int64),
        genes=genes,
        conditions=conditions,
        mode=manifest.get("mode", "normalized"),
        cell_ids=[str(c) for c in frame["cell_id"].tolist()],
        paired=bool(manifest.get("paired", False)),
    )


def load_truth_latents(path: str | Path, ds: SnapshotDataset) -> dict[tuple[str, int], np.ndarray] | None:
    """Ground-truth latents per (condition, time), or None when absent."""
    truth_dir = Path(path) / "latents_truth" if Path(path).is_dir() else Path(path)
    if not truth_dir.exists():
        return None
    out: dict[tuple[str, int], np.ndarray] = {}
    for cid in ds.conditions:
        for t in ds.times_for(cid):
            f = truth_dir / f"{cid}_t{t}.csv"
            if not f.exists():
                return None
            frame = pd.read_csv(f, float_precision="round_trip")
            out[(cid, t)] = frame.to_numpy(dtype=np.float64)
    return out


def normalize_counts(ds: SnapshotDataset, target_sum: float = 10_000.0) -> SnapshotDataset:
    """Library-size normalization to `target_sum` per cell, then log1p."""
    if ds.mode != "counts":
        raise ValidationError("normalize_counts: dataset is not in count mode")
    sums = ds.expression.sum(axis=1)
    keep = sums > 0
    if not keep.any():
        raise ValidationError("normalize_counts: all cells have zero library size")
    expr = ds.expression[keep]
    scaled = expr * (target_sum / expr.sum(axis=1, keepdims=True))
    dropped = int((~keep).sum())
    return SnapshotDataset(
        expression=np.log1p(scaled),
        condition=[c for c, k in zip(ds.condition, keep) if k],
        time=ds.time[keep],
        genes=ds.genes,
        conditions=ds.conditions,
        mode="normalized",
        cell_ids=[c for c, k in zip(ds.cell_ids, keep) if k],
        norm_dropped_cells=dropped,
        paired=ds.paired and dropped == 0,
    )


def select_hvg(ds: SnapshotDataset, train_mask: np.ndarray, k: int) -> np.ndarray:
    """Top-k genes by variance over training cells; ties to the lower index."""
    train_mask = np.asarray(train_mask, dtype=bool)
    if not train_mask.any():
        raise ValidationError("select_hvg: empty training mask")
    if k > ds.n_genes:
        raise ValidationError("select_hvg: k exceeds gene count")
    var = ds.expression[train_mask].var(axis=0)
    order = np.lexsort((np.arange(ds.n_genes), -var))
    return np.sort(order[:k])


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values; ties broken by ascending index."""
    order = np.lexsort((np.arange(values.size), -values))
    return order[:k]


@dataclass
class FoldSpec:
    held_out: str
    training: list[str]
    de_mask: np.ndarray
    hvg: np.ndarray

    def __post_init__(self) -> None:
        if self.held_out in self.training:
            raise ValidationError("FoldSpec: held-out condition present in training set")


def build_de_mask(ds: SnapshotDataset, training: list[str], k_top: int,
                  genes: np.ndarray | None = None) -> np.ndarray:
    """Union over training (condition, time) of top-k |pseudobulk shift| vs control."""
    ctrl = ds.control_id
    n = ds.n_genes if genes is None else len(genes)
    mask = np.zeros(n, dtype=bool)
    for cid in training:
        if cid == ctrl:
            continue
        for t in ds.times_for(cid):
            if not ds.group_rows(ctrl, t).size:
                continue
            delta = np.abs(ds.pseudobulk(cid, t, genes) - ds.pseudobulk(ctrl, t, genes))
            mask[top_k_indices(delta, min(k_top, n))] = True
    return mask


def build_loo_folds(ds: SnapshotDataset, k_top: int, hvg_k: int = 0) -> list[FoldSpec]:
    ctrl = ds.control_id
    perturbations = [c for c in ds.condition_ids() if c != ctrl]
    if len(perturbations) < 2:
        raise ValidationError("build_loo_folds: need at least 2 non-control conditions")
    cond = np.asarray(ds.condition)
    folds = []
    for held in perturbations:
        training = [ctrl] + [c for c in perturbations if c != held]
        train_mask = np.isin(cond, training)
        hvg = (select_hvg(ds, train_mask, hvg_k) if hvg_k
               else np.arange(ds.n_genes))
        de_mask = build_de_mask(ds, training, k_top, genes=hvg)
        folds.append(FoldSpec(held, training, de_mask, hvg))
    return folds


# -- batch streams -------------------------------------------------------------

_POOL_SIZE = 20_000


class BatchSampler:
    """Per-epoch (PairBatch, AlignBatch | None) streams over a dataset.

    Sinkhorn-coupled pairs are expensive to build, so dense plans are computed
    once per (condition, time) on populations subsampled to at most
    `sinkhorn_max_cells`, a pool of pairs is sampled from each plan, and every
    epoch draws its batches from the pool. Pools depend only on (data, seed),
    so a fresh sampler reproduces the same stream as a persistent one.
    """

    def __init__(self, ds: SnapshotDataset, training: list[str] | None, coupling_mode: str,
                 batch_size: int, seed: int, crossfit_mode: str = "independent",
                 sinkhorn_max_cells: int = 512, genes: np.ndarray | None = None,
                 sinkhorn_eps_scale: float = 0.2, batches_per_pair: int = 1) -> None:
        self.ds = ds
        self.conditions = training if training is not None else ds.condition_ids()
        self.coupling_mode = coupling_mode
        self.crossfit_mode = crossfit_mode
        self.batch_size = batch_size
        self.seed = seed
        self.max_cells = sinkhorn_max_cells
        self.genes = genes
        self.eps_scale = sinkhorn_eps_scale
        self.batches_per_pair = batches_per_pair
        self._pools: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def _expr(self) -> np.ndarray:
        return self.ds.expression if self.genes is None else self.ds.expression[:, self.genes]

    def _sinkhorn_pool(self, kind: str, cid: str, rows_a: np.ndarray, rows_b: np.ndarray,
                       t: int) -> tuple[np.ndarray, np.ndarray]:
        key = (kind, cid, t)
        if key not in self._pools:
            rng = spawn_rng(self.seed, "sinkhorn-subsample", kind, cid, t)
            sub_a = rows_a if rows_a.size <= self.max_cells else \
                np.sort(rng.choice(rows_a, self.max_cells, replace=False))
            sub_b = rows_b if rows_b.size <= self.max_cells else \
                np.sort(rng.choice(rows_b, self.max_cells, replace=False))
            a, b = self._expr()[sub_a], self._expr()[sub_b]
            cost = np.maximum(np.square(a).sum(1)[:, None] + np.square(b).sum(1)[None, :]
                              - 2.0 * a @ b.T, 0.0)
            eps = self.eps_scale * float(np.median(cost)) if np.median(cost) > 0 \
                else default_sinkhorn_eps(cost)
            plan = sinkhorn_coupling(cost, eps, n_pairs=_POOL_SIZE,
                                     seed=int(rng.integers(2 ** 31)))
            self._pools[key] = (sub_a[plan.src], sub_b[plan.dst])
        return self._pools[key]

    def _resolve(self, mode: str) -> str:
        if mode == "auto":
            return "index" if self.ds.paired else "independent"
        return mode

    def _draw(self, kind: str, cid: str, rows_a: np.ndarray, rows_b: np.ndarray, t: int,
              mode: str, epoch: int) -> tuple[np.ndarray, np.ndarray]:
        mode = self._resolve(mode)
        if mode == "independent":
            seed = int(spawn_rng(self.seed, kind, epoch, cid, t).integers(2 ** 31))
            plan = independent_coupling(rows_a.size, rows_b.size, self.batch_size, seed)
            return rows_a[plan.src], rows_b[plan.dst]
        if mode == "index":
            # row-aligned coupling; valid only when the dataset is trajectory-paired
            if not self.ds.paired:
                raise ValidationError("index coupling requires a row-paired dataset")
            rng = spawn_rng(self.seed, kind + "-index", epoch, cid, t)
            take = rng.integers(0, min(rows_a.size, rows_b.size), size=self.batch_size)
            return rows_a[take], rows_b[take]
        if mode == "sinkhorn":
            pool_a, pool_b = self._sinkhorn_pool(kind, cid, rows_a, rows_b, t)
            rng = spawn_rng(self.seed, kind + "-pool-draw", epoch, cid, t)
            take = rng.integers(0, pool_a.size, size=self.batch_size)
            return pool_a[take], pool_b[take]
        raise ValidationError(f"unknown coupling mode {mode!r}")

    def epoch(self, epoch: int) -> tuple[list[tuple[PairBatch, AlignBatch | None]], list[str]]:
        ds = self.ds
        ctrl = ds.control_id
        expr = self._expr()
        steps: list[tuple[PairBatch, AlignBatch | None]] = []
        skipped: list[str] = []
        for cid in self.conditions:
            times = ds.times_for(cid)
            for t_prev, t_curr in zip(times[:-1], times[1:]):
                if t_curr != t_prev + 1:
                    skipped.append(f"{cid}: missing timepoint between {t_prev} and {t_curr}")
                    continue
                for draw in range(self.batches_per_pair):
                    tick = epoch * self.batches_per_pair + draw
                    src, dst = self._draw("pairs", cid, ds.group_rows(cid, t_prev),
                                          ds.group_rows(cid, t_curr), t_curr,
                                          self.coupling_mode, tick)
                    pair = PairBatch(expr[src], expr[dst], cid, t_curr)
                    align = None
                    if cid != ctrl:
                        ctrl_rows = ds.group_rows(ctrl, t_curr)
                        if ctrl_rows.size == 0:
                            skipped.append(f"{cid}: control missing at t={t_curr}, "
                                           "alignment skipped")
                        else:
                            a_src, a_dst = self._draw("crossfit", cid,
                                                      ds.group_rows(cid, t_curr),
                                                      ctrl_rows, t_curr,
                                                      self.crossfit_mode, tick)
                            align = AlignBatch(expr[a_src], expr[a_dst], cid, t_curr)
                    steps.append((pair, align))
        return steps, skipped


def build_pair_batches(ds: SnapshotDataset, training: list[str] | None, coupling_mode: str,
                       batch_size: int, seed: int, epoch: int = 0,
                       crossfit_mode: str = "independent",
                       sinkhorn_max_cells: int = 512,
                       genes: np.ndarray | None = None):
    """One epoch of (PairBatch, AlignBatch | None) steps plus a skip report.

    Temporal pairs are drawn within each (condition, t -> t+1) via the chosen
    coupling; alignment pairs at the current time across (condition, control).
    Deterministic given (seed, epoch).
    """
    sampler = BatchSampler(ds, training, coupling_mode, batch_size, seed,
                           crossfit_mode=crossfit_mode,
                           sinkhorn_max_cells=sinkhorn_max_cells, genes=genes)
    return sampler.epoch(epoch)


# -- run configuration ----------------------------------------------------------


@dataclass
class ModelSection:
    d_inv: int = 2
    d_resp: int = 3
    d_cond: int = 8
    d_target: int = 8
    hidden: int = 64


@dataclass
class TrainingSection:
    lam_align: float = 1.0
    lam_reg: float = 0.01
    lam_prior0: float = 0.0
    warmstart_frac: float = 0.15    # reconstruction-only epochs before the full objective
    align_warmup_frac: float = 0.2  # then ramp lam_align from 0 over this fraction of epochs
    sparsity_delay_frac: float = 0.5  # keep lam_reg off until this fraction of epochs
    lr: float = 3e-3
    lr_decay: float = 1.0    # final lr = lr * lr_decay, interpolated per epoch
    batch_size: int = 128
    batches_per_pair: int = 1  # optimizer steps per (condition, transition) per epoch
    epochs: int = 150
    coupling: str = "independent"
    crossfit: str = "auto"   # index when the dataset is trajectory-paired, else independent
    sinkhorn_max_cells: int = 512


@dataclass
class EvalSection:
    hvg_k: int = 0
    de_top_k: int = 100
    probe_epochs: int = 500
    probe_max_rows: int = 5000


@dataclass
class RunConfig:
    seed: int = 0
    generator: dict = field(default_factory=dict)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        t = self.training
        if t.batch_size < 1 or t.epochs < 1 or t.lr <= 0:
            raise ValidationError("RunConfig: batch_size, epochs, lr must be positive")
        if t.lam_align < 0 or t.lam_reg < 0:
            raise ValidationError("RunConfig: lambda weights must be nonnegative")
        if self.evaluation.de_top_k < 1:
            raise ValidationError("RunConfig: de_top_k must be positive")


def _from_mapping(cls, data: dict, where: str):
    allowed = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - allowed
    if unknown:
        raise ValidationError(f"config section {where}: unknown keys {sorted(unknown)}")
    return cls(**data)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    known = {"seed", "generator", "model", "training", "evaluation"}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"config: unknown top-level keys {sorted(unknown)}")
    cfg = RunConfig(
        seed=int(doc.get("seed", 0)),
        generator=doc.get("generator", {}),
        model=_from_mapping(ModelSection, doc.get("model", {}), "model"),
        training=_from_mapping(TrainingSection, doc.get("training", {}), "training"),
        evaluation=_from_mapping(EvalSection, doc.get("evaluation", {}), "evaluation"),
    )
    cfg.validate()
    return cfg


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    doc = {"seed": cfg.seed, "generator": cfg.generator, "model": asdict(cfg.model),
           "training": asdict(cfg.training), "evaluation": asdict(cfg.evaluation)}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


# -- compact binary mirror -------------------------------------------------------


def save_matrix_binary(path: str | Path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes())


def load_matrix_binary(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise ValidationError(f"{path}: bad magic, not a CDYN1 matrix")
    rows, cols = struct.unpack("<II", raw[5:13])
    return np.frombuffer(raw[13:], dtype="<f8").reshape(rows, cols).copy()

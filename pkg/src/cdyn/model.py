"""Generative model and inference networks.

Latents split into an invariant block (dynamics and innovations shared by
every condition) and a responsive block (transition mechanisms and innovation
moments shift with the condition). The pieces:

- invariant encoder x -> Gaussian over z_inv (sees neither condition nor time
  by construction: those inputs do not exist in its signature or graph);
- responsive encoder (x, condition embedding, t/T) -> Gaussian over z_resp;
- decoder z -> mean expression, shared across times and conditions, unit
  observation variance;
- invariant transition prior z_inv -> Gaussian over next z_inv;
- responsive transition prior: a condition-specific strictly lower-triangular
  gate W(u) = mask * tanh(A0 + modulation(e(u))) selects which earlier
  responsive coordinates feed each target; a single shared network maps
  (W(u)[j] * z_resp, z_inv, e(u), target embedding j) to that target's
  Gaussian;
- score-difference diagnostic between two conditions' transition priors.

Every network is a 2-hidden-layer tanh MLP of width `hidden`. All math runs
through the tape module, so the same graph serves evaluation and gradients.
ModelParams is immutable during evaluation and safe for concurrent reads.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .rng import spawn_rng
from .tape import Tape


@dataclass
class GaussianDiag:
    """Diagonal Gaussian as (mean, log-variance); shapes must match."""
    mean: np.ndarray
    logvar: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.logvar = np.asarray(self.logvar, dtype=np.float64)
        if self.mean.shape != self.logvar.shape:
            raise ValidationError(
                f"GaussianDiag: mean shape {self.mean.shape} != logvar shape {self.logvar.shape}"
            )

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)


@dataclass
class LatentState:
    """Latent vector split as (invariant block, responsive block), in that order."""
    z_inv: np.ndarray
    z_resp: np.ndarray

    def __post_init__(self) -> None:
        self.z_inv = np.asarray(self.z_inv, dtype=np.float64)
        self.z_resp = np.asarray(self.z_resp, dtype=np.float64)

    def concat(self) -> np.ndarray:
        return np.concatenate([self.z_inv, self.z_resp], axis=-1)


@dataclass
class AdjacencyW:
    """Strictly lower-triangular gate matrix with entries in (-1, 1)."""
    w: np.ndarray


@dataclass
class ModelConfig:
    d_inv: int = 2
    d_resp: int = 3
    n_genes: int = 20
    d_cond: int = 8
    d_target: int = 8
    hidden: int = 64
    horizon: int = 5
    conditions: list[str] = field(default_factory=list)

    def cond_index(self, condition_id: str) -> int:
        try:
            return self.conditions.index(condition_id)
        except ValueError:
            raise ValidationError(f"unknown condition id {condition_id!r}") from None


def _mlp_shapes(n_in: int, hidden: int, n_out: int) -> list[tuple[int, int]]:
    return [(n_in, hidden), (1, hidden), (hidden, hidden), (1, hidden), (hidden, n_out), (1, n_out)]


_MLP_SUFFIXES = ("w1", "b1", "w2", "b2", "w3", "b3")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Canonical parameter layout; dict order defines the flat vector."""
    d = config.d_inv + config.d_resp
    shapes: dict[str, tuple[int, int]] = {}

    def mlp(prefix: str, n_in: int, n_out: int) -> None:
        for suffix, shape in zip(_MLP_SUFFIXES, _mlp_shapes(n_in, config.hidden, n_out)):
            shapes[f"{prefix}.{suffix}"] = shape

    mlp("enc_inv", config.n_genes, 2 * config.d_inv)
    mlp("enc_resp", config.n_genes + config.d_cond + 1, 2 * config.d_resp)
    mlp("dec", d, config.n_genes)
    mlp("tr_inv", config.d_inv, 2 * config.d_inv)
    mlp("tr_resp", config.d_resp + config.d_inv + config.d_cond + config.d_target, 2)
    shapes["adj.base"] = (config.d_resp, config.d_resp)
    shapes["adj.mod"] = (config.d_cond, config.d_resp * config.d_resp)
    shapes["emb.cond"] = (len(config.conditions), config.d_cond)
    shapes["emb.target"] = (config.d_resp, config.d_target)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    values: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        expected = param_shapes(self.config)
        if list(self.values.keys()) != list(expected.keys()):
            raise ValidationError("ModelParams: parameter names do not match the canonical layout")
        for name, shape in expected.items():
            arr = np.asarray(self.values[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValidationError(f"ModelParams: {name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"ModelParams: {name} contains non-finite entries")
            self.values[name] = arr

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.values.values()])

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64).ravel()
        out: dict[str, np.ndarray] = {}
        offset = 0
        for name, arr in self.values.items():
            size = arr.size
            out[name] = flat[offset:offset + size].reshape(arr.shape).copy()
            offset += size
        if offset != flat.size:
            raise ValidationError(f"with_flat: vector has {flat.size} entries, expected {offset}")
        return ModelParams(self.config, out)

    def n_params(self) -> int:
        return sum(a.size for a in self.values.values())


def init_model_params(config: ModelConfig, seed: int) -> ModelParams:
    if not config.conditions:
        raise ValidationError("ModelConfig.conditions must be nonempty")
    rng = spawn_rng(seed, "model-init")
    values: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith((".b1", ".b2", ".b3")):
            values[name] = np.zeros(shape)
        elif name.endswith(".w3"):
            scale = 0.1 * np.sqrt(2.0 / (shape[0] + shape[1]))
            values[name] = rng.normal(scale=scale, size=shape)
        elif name == "adj.base":
            # start the gates open; the L1 penalty prunes them during training
            values[name] = rng.normal(scale=1.0, size=shape)
        elif name == "adj.mod":
            values[name] = rng.normal(scale=0.1, size=shape)
        elif name.startswith("emb."):
            values[name] = rng.normal(scale=1.0, size=shape)
        else:
            scale = np.sqrt(2.0 / (shape[0] + shape[1]))
            values[name] = rng.normal(scale=scale, size=shape)
    # start the Gaussian heads sharp: the logvar half of each head's bias at -2
    for prefix, d_out in (("enc_inv", config.d_inv), ("enc_resp", config.d_resp),
                          ("tr_inv", config.d_inv)):
        values[f"{prefix}.b3"][0, d_out:] = -2.0
    values["tr_resp.b3"][0, 1:] = -2.0
    return ModelParams(config, values)


# -- graph builders ----------------------------------------------------------


def declare_params(tape: Tape, params: ModelParams) -> dict[str, int]:
    return {name: tape.input(arr.shape) for name, arr in params.values.items()}


def mlp_graph(tape: Tape, pn: dict[str, int], prefix: str, x: int) -> int:
    h1 = tape.tanh(tape.add(tape.matmul(x, pn[f"{prefix}.w1"]), pn[f"{prefix}.b1"]))
    h2 = tape.tanh(tape.add(tape.matmul(h1, pn[f"{prefix}.w2"]), pn[f"{prefix}.b2"]))
    return tape.add(tape.matmul(h2, pn[f"{prefix}.w3"]), pn[f"{prefix}.b3"])


def _split_heads(tape: Tape, out: int, d: int) -> tuple[int, int]:
    rows = tape.shape(out)[0]
    return tape.slice(out, 0, rows, 0, d), tape.slice(out, 0, rows, d, 2 * d)


def encoder_inv_graph(tape: Tape, pn: dict[str, int], x: int, config: ModelConfig) -> tuple[int, int]:
    return _split_heads(tape, mlp_graph(tape, pn, "enc_inv", x), config.d_inv)


def tile_row(tape: Tape, row: int, n_rows: int) -> int:
    return tape.matmul(tape.constant(np.ones((n_rows, 1))), row)


def cond_row_graph(tape: Tape, pn: dict[str, int], cond_idx: int, config: ModelConfig) -> int:
    return tape.slice(pn["emb.cond"], cond_idx, cond_idx + 1, 0, config.d_cond)


def encoder_resp_graph(tape: Tape, pn: dict[str, int], x: int, cond_row: int,
                       time_frac: float, config: ModelConfig) -> tuple[int, int]:
    n_rows = tape.shape(x)[0]
    inp = tape.concat(
        [x, tile_row(tape, cond_row, n_rows), tape.constant(np.full((n_rows, 1), time_frac))],
        axis=1,
    )
    return _split_heads(tape, mlp_graph(tape, pn, "enc_resp", inp), config.d_resp)


def decoder_graph(tape: Tape, pn: dict[str, int], z: int) -> int:
    return mlp_graph(tape, pn, "dec", z)


def adjacency_graph(tape: Tape, pn: dict[str, int], cond_row: int, config: ModelConfig) -> int:
    d = config.d_resp
    rows = [
        tape.matmul(cond_row, tape.slice(pn["adj.mod"], 0, config.d_cond, j * d, (j + 1) * d))
        for j in range(d)
    ]
    raw = tape.add(pn["adj.base"], tape.concat(rows, axis=0)) if d > 1 else tape.add(pn["adj.base"], rows[0])
    mask = np.tril(np.ones((d, d)), k=-1)
    return tape.mul(tape.tanh(raw), tape.constant(mask))


def transition_prior_graph(tape: Tape, pn: dict[str, int], z_inv: int, z_resp: int,
                           cond_row: int, config: ModelConfig) -> tuple[int, int, int, int]:
    n_rows = tape.shape(z_inv)[0]
    mean_inv, logvar_inv = _split_heads(tape, mlp_graph(tape, pn, "tr_inv", z_inv), config.d_inv)

    w = adjacency_graph(tape, pn, cond_row, config)
    cond_tiled = tile_row(tape, cond_row, n_rows)
    means, logvars = [], []
    for j in range(config.d_resp):
        gate_row = tape.slice(w, j, j + 1, 0, config.d_resp)
        gated = tape.mul(z_resp, gate_row)
        target_row = tape.slice(pn["emb.target"], j, j + 1, 0, config.d_target)
        inp = tape.concat([gated, z_inv, cond_tiled, tile_row(tape, target_row, n_rows)], axis=1)
        out = mlp_graph(tape, pn, "tr_resp", inp)
        means.append(tape.slice(out, 0, n_rows, 0, 1))
        logvars.append(tape.slice(out, 0, n_rows, 1, 2))
    mean_resp = tape.concat(means, axis=1)
    logvar_resp = tape.concat(logvars, axis=1)
    return mean_inv, logvar_inv, mean_resp, logvar_resp


def kl_graph(tape: Tape, mean_q: int, logvar_q: int, mean_p: int, logvar_p: int) -> int:
    """Elementwise KL(q || p) for diagonal Gaussians; same shape as the means."""
    dlog = tape.sub(logvar_q, logvar_p)
    ratio = tape.exp(dlog)
    sq = tape.mul(tape.square(tape.sub(mean_q, mean_p)), tape.exp(tape.neg(logvar_p)))
    inner = tape.add(tape.add(ratio, sq), tape.add(tape.constant([[-1.0]]), tape.neg(dlog)))
    return tape.scale(inner, 0.5)


# -- evaluation wrappers ------------------------------------------------------

_CHUNK_ROWS = 8192


def _as_batch(x: np.ndarray, width: int, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValidationError(f"{what}: expected width {width}, got shape {np.asarray(x).shape}")
    return arr, single


def _run_graph(params: ModelParams, build) -> list[np.ndarray]:
    """build(tape, pn) -> list of node ids; returns their forward values."""
    tape = Tape()
    pn = declare_params(tape, params)
    outs = build(tape, pn)
    tape.mark_loss(tape.sum(outs[0]))
    tape.forward(params.flatten())
    return [tape.value(o) for o in outs]


def _chunked(params: ModelParams, x: np.ndarray, build_one) -> list[np.ndarray]:
    pieces: list[list[np.ndarray]] = []
    for start in range(0, x.shape[0], _CHUNK_ROWS):
        chunk = x[start:start + _CHUNK_ROWS]
        pieces.append(_run_graph(params, lambda t, pn: build_one(t, pn, chunk)))
    return [np.concatenate(cols, axis=0) for cols in zip(*pieces)]


def encode_invariant(params: ModelParams, x: np.ndarray) -> GaussianDiag:
    arr, single = _as_batch(x, params.config.n_genes, "encode_invariant")

    def build(tape, pn, chunk):
        return list(encoder_inv_graph(tape, pn, tape.constant(chunk), params.config))

    mean, logvar = _chunked(params, arr, build)
    if single:
        mean, logvar = mean[0], logvar[0]
    return GaussianDiag(mean, logvar)


def encode_responsive(params: ModelParams, x: np.ndarray, condition_id: str,
                      time_index: int) -> GaussianDiag:
    config = params.config
    if not (0 <= time_index <= config.horizon):
        raise ValidationError(f"time index {time_index} outside [0, {config.horizon}]")
    cond_idx = config.cond_index(condition_id)
    arr, single = _as_batch(x, config.n_genes, "encode_responsive")
    time_frac = time_index / config.horizon

    def build(tape, pn, chunk):
        cond_row = cond_row_graph(tape, pn, cond_idx, config)
        return list(encoder_resp_graph(tape, pn, tape.constant(chunk), cond_row, time_frac, config))

    mean, logvar = _chunked(params, arr, build)
    if single:
        mean, logvar = mean[0], logvar[0]
    return GaussianDiag(mean, logvar)


def decode(params: ModelParams, z: LatentState) -> np.ndarray:
    config = params.config
    z_inv, single = _as_batch(z.z_inv, config.d_inv, "decode z_inv")
    z_resp, _ = _as_batch(z.z_resp, config.d_resp, "decode z_resp")
    if z_inv.shape[0] != z_resp.shape[0]:
        raise ValidationError("decode: z_inv and z_resp row counts differ")
    joined = np.concatenate([z_inv, z_resp], axis=1)

    def build(tape, pn, chunk):
        return [decoder_graph(tape, pn, tape.constant(chunk))]

    (out,) = _chunked(params, joined, build)
    return out[0] if single else out


def reparam_sample(q: GaussianDiag, noise: np.ndarray) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != q.mean.shape:
        raise ValidationError(f"reparam_sample: noise shape {noise.shape} != {q.mean.shape}")
    return q.mean + np.exp(0.5 * q.logvar) * noise


def kl_diag_gaussian(q: GaussianDiag, p: GaussianDiag) -> float:
    if q.mean.shape != p.mean.shape:
        raise ValidationError("kl_diag_gaussian: shape mismatch")
    dlog = q.logvar - p.logvar
    val = 0.5 * (np.exp(dlog) + np.square(q.mean - p.mean) * np.exp(-p.logvar) - 1.0 - dlog)
    return float(val.sum())


def build_condition_adjacency(params: ModelParams, condition_id: str) -> AdjacencyW:
    config = params.config
    cond_idx = config.cond_index(condition_id)

    def build(tape, pn):
        cond_row = cond_row_graph(tape, pn, cond_idx, config)
        return [adjacency_graph(tape, pn, cond_row, config)]

    (w,) = _run_graph(params, build)
    return AdjacencyW(w)


def transition_prior(params: ModelParams, z_prev: LatentState,
                     condition_id: str) -> tuple[GaussianDiag, GaussianDiag]:
    config = params.config
    cond_idx = config.cond_index(condition_id)
    z_inv, single = _as_batch(z_prev.z_inv, config.d_inv, "transition_prior z_inv")
    z_resp, _ = _as_batch(z_prev.z_resp, config.d_resp, "transition_prior z_resp")
    if z_inv.shape[0] != z_resp.shape[0]:
        raise ValidationError("transition_prior: z_inv and z_resp row counts differ")

    def build(tape, pn):
        cond_row = cond_row_graph(tape, pn, cond_idx, config)
        return list(transition_prior_graph(
            tape, pn, tape.constant(z_inv), tape.constant(z_resp), cond_row, config))

    mi, li, mr, lr = _run_graph(params, build)
    if single:
        mi, li, mr, lr = mi[0], li[0], mr[0], lr[0]
    return GaussianDiag(mi, li), GaussianDiag(mr, lr)


def transition_score_diff(params: ModelParams, z_t: LatentState, z_prev: LatentState,
                          env_id: str, baseline_id: str) -> tuple[np.ndarray, np.ndarray]:
    """Difference of transition score functions at z_t between env and baseline.

    For diagonal Gaussian priors the score is -(z - mean) / var per coordinate,
    so the difference is computed in closed form from the two priors.
    """
    prior_env = transition_prior(params, z_prev, env_id)
    prior_base = transition_prior(params, z_prev, baseline_id)

    def score(z: np.ndarray, g: GaussianDiag) -> np.ndarray:
        return -(np.asarray(z, dtype=np.float64) - g.mean) * np.exp(-g.logvar)

    block_inv = score(z_t.z_inv, prior_env[0]) - score(z_t.z_inv, prior_base[0])
    block_resp = score(z_t.z_resp, prior_env[1]) - score(z_t.z_resp, prior_base[1])
    return block_inv, block_resp


# -- serialization ------------------------------------------------------------


def save_model(params: ModelParams, path: str | Path) -> None:
    doc = {
        "config": asdict(params.config),
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in params.values.items()
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_model(path: str | Path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read model file {path}: {exc}") from exc
    config = ModelConfig(**doc["config"])
    values = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    expected = list(param_shapes(config).keys())
    values = {name: values[name] for name in expected}
    return ModelParams(config, values)

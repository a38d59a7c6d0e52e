"""Synthetic temporal interventional benchmark with ground-truth latents.

The generator realizes the assumed data-generating process directly:
invariant coordinates follow a condition-independent drift
f_inv(z) = alpha*z + (1-alpha)*tanh(Theta_inv z); each responsive coordinate j
follows tanh(theta_j . parents) plus a conditionated innovation whose
(mean, variance) shift per environment. Environments are constructed so the
identifiability preconditions hold and are verified, not assumed:

- 2*d_resp moment-shift environments whose stacked natural-parameter
  differences against baseline pass an explicit full-rank check;
- d_resp isolation environments where one coordinate's mechanism is replaced
  by the constant 0, leaving pure innovation dynamics for that coordinate.

Observations are an injective mixing of the latents: square leaky-relu layers
with bounded condition number followed by a full-column-rank linear embedding
into gene space. Ground-truth latents are retained alongside every snapshot.
Generation is deterministic given the seed; per-environment streams use
derived seeds and may run concurrently.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ComputeError, ValidationError
from .rng import spawn_rng
from .tape import LEAKY_SLOPE


@dataclass
class GeneratorConfig:
    d_inv: int = 2
    d_resp: int = 3
    n_genes: int = 20
    horizon: int = 5
    n_cells: int = 2000
    alpha: float = 0.7
    mix_depth: int = 2
    edge_prob: float = 0.5
    mean_shift_scale: float = 1.0
    var_low: float = 0.1
    var_high: float = 0.6
    # hard cap is 20; the default keeps the mixing near-isometric so every
    # latent direction carries comparable observation variance
    max_condition_number: float = 2.0
    spectral_target: float = 0.95
    obs_scale: float = 3.0
    seed: int = 0

    @property
    def condition_cap(self) -> float:
        return min(self.max_condition_number, 20.0)

    def __post_init__(self) -> None:
        if self.d_inv < 1 or self.d_resp < 1:
            raise ValidationError("generator: latent dims must be >= 1")
        if self.n_genes < self.d_inv + self.d_resp:
            raise ValidationError("generator: need n_genes >= d_inv + d_resp")
        if not (0.0 < self.alpha <= 1.0):
            raise ValidationError("generator: alpha must lie in (0, 1]")


@dataclass
class Environment:
    cond_id: str
    u: np.ndarray                 # binary target indicator over responsive coords
    mu_resp: np.ndarray
    var_resp: np.ndarray
    isolated: np.ndarray          # boolean per responsive coord
    is_control: bool = False


@dataclass
class EnvironmentBank:
    mu_inv: np.ndarray
    var_inv: np.ndarray
    envs: list[Environment]

    def __post_init__(self) -> None:
        if not self.envs or not self.envs[0].is_control or np.any(self.envs[0].u != 0):
            raise ValidationError("EnvironmentBank: envs[0] must be the baseline with u = 0")
        # zero variance is tolerated at the type level for noiseless fixtures;
        # operations that divide by it (the rank check) reject it themselves
        for env in self.envs:
            if np.any(env.var_resp < 0):
                raise ValidationError(f"EnvironmentBank: negative variance in {env.cond_id}")
        if np.any(self.var_inv < 0):
            raise ValidationError("EnvironmentBank: negative invariant variance")

    def by_id(self, cond_id: str) -> Environment:
        for env in self.envs:
            if env.cond_id == cond_id:
                return env
        raise ValidationError(f"unknown environment {cond_id!r}")


@dataclass
class GeneratorSpec:
    config: GeneratorConfig
    parent_mask_resp: np.ndarray  # (d_resp, d_resp) strictly lower
    parent_mask_inv: np.ndarray   # (d_resp, d_inv)
    theta_inv: np.ndarray         # (d_inv, d_inv)
    theta_resp: np.ndarray        # (d_resp, d_inv + d_resp), zero outside masks
    mixing_layers: list[np.ndarray] = field(default_factory=list)
    embed: np.ndarray = None      # type: ignore[assignment]


@dataclass
class TrajectoryBundle:
    latents: dict[tuple[str, int], np.ndarray]
    observations: dict[tuple[str, int], np.ndarray]
    paired: bool
    row_origin: dict[tuple[str, int], np.ndarray]


def _condition_bounded(matrix: np.ndarray, max_cond: float) -> np.ndarray:
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    s = np.clip(s, s.max() / max_cond, None)
    return u @ np.diag(s) @ vt


def check_rank_condition(bank: EnvironmentBank) -> tuple[int, bool]:
    """Numerical rank of the stacked natural-parameter differences.

    Uses the first 2*d_resp non-baseline moment-shift environments; singular
    values above 1e-8 of the largest count toward the rank.
    """
    base = bank.envs[0]
    d = base.mu_resp.size
    shifts = [env for env in bank.envs[1:] if not env.isolated.any()]
    if len(shifts) < 2 * d:
        raise ValidationError(f"rank check needs >= {2 * d} moment-shift environments, "
                              f"got {len(shifts)}")
    if np.any(base.var_resp == 0) or any(np.any(e.var_resp == 0) for e in shifts):
        raise ValidationError("rank check requires strictly positive variances")
    rows = []
    for env in shifts[:2 * d]:
        first = env.mu_resp / env.var_resp - base.mu_resp / base.var_resp
        second = -0.5 * (1.0 / env.var_resp - 1.0 / base.var_resp)
        rows.append(np.concatenate([first, second]))
    stacked = np.stack(rows)
    sv = np.linalg.svd(stacked, compute_uv=False)
    rank = int(np.sum(sv > 1e-8 * sv.max())) if sv.max() > 0 else 0
    return rank, rank == 2 * d


def natural_param_matrix(bank: EnvironmentBank) -> np.ndarray:
    base = bank.envs[0]
    d = base.mu_resp.size
    shifts = [env for env in bank.envs[1:] if not env.isolated.any()][:2 * d]
    rows = []
    for env in shifts:
        first = env.mu_resp / env.var_resp - base.mu_resp / base.var_resp
        second = -0.5 * (1.0 / env.var_resp - 1.0 / base.var_resp)
        rows.append(np.concatenate([first, second]))
    return np.stack(rows)


def make_generator(config: GeneratorConfig) -> tuple[GeneratorSpec, EnvironmentBank]:
    rng = spawn_rng(config.seed, "generator")
    di, dr = config.d_inv, config.d_resp

    # parent structure: strictly lower triangular among responsive coords plus
    # a block of invariant parents; every coordinate keeps at least one parent
    # and every non-first responsive coordinate keeps a responsive parent so
    # the lagged DAG actually propagates within the responsive block
    mask_resp = np.zeros((dr, dr), dtype=bool)
    for j in range(dr):
        for k in range(j):
            mask_resp[j, k] = rng.random() < config.edge_prob
        if j > 0 and not mask_resp[j].any():
            mask_resp[j, int(rng.integers(j))] = True
    mask_inv = rng.random((dr, di)) < config.edge_prob
    for j in range(dr):
        if not mask_resp[j].any() and not mask_inv[j].any():
            mask_inv[j, int(rng.integers(di))] = True

    theta_inv = rng.normal(scale=1.0, size=(di, di))
    theta_resp = rng.normal(scale=1.0, size=(dr, di + dr))
    theta_resp[:, :di] *= mask_inv
    theta_resp[:, di:] *= mask_resp
    # per-row normalization keeps every mechanism comparably strong before the
    # global contraction rescale below
    for j in range(dr):
        resp_norm = np.linalg.norm(theta_resp[j, di:])
        if resp_norm > 0:
            theta_resp[j, di:] *= 0.9 / resp_norm
        inv_norm = np.linalg.norm(theta_resp[j, :di])
        if inv_norm > 0:
            theta_resp[j, :di] *= 0.5 / inv_norm

    # rescale so the transition linearized at the origin is a contraction
    jac = np.zeros((di + dr, di + dr))
    jac[:di, :di] = config.alpha * np.eye(di) + (1.0 - config.alpha) * theta_inv
    jac[di:, :] = theta_resp
    norm = np.linalg.norm(jac, 2)
    if norm > config.spectral_target:
        shrink = config.spectral_target / norm
        theta_inv = theta_inv * shrink
        theta_resp = theta_resp * shrink

    mixing = []
    width = di + dr
    for layer in range(config.mix_depth):
        w = rng.normal(scale=1.0 / np.sqrt(width), size=(width, width))
        mixing.append(_condition_bounded(w, config.condition_cap))
    embed = rng.normal(scale=1.0 / np.sqrt(width), size=(config.n_genes, width))
    while np.linalg.matrix_rank(embed) < width:  # full column rank, a.s. immediate
        embed = rng.normal(scale=1.0 / np.sqrt(width), size=(config.n_genes, width))
    embed = _condition_bounded(embed, config.condition_cap)
    # observations are a noiseless mixing, so the output amplitude is a free
    # scale; calibrate the mean per-gene std to obs_scale, which sets how
    # sharp the fixed unit-variance likelihood is relative to the signal
    probe = rng.standard_normal((1024, width))
    h = probe
    for w in mixing:
        h = h @ w.T
        h = np.where(h >= 0.0, h, LEAKY_SLOPE * h)
    spread = float((h @ embed.T).std(axis=0).mean())
    embed = embed * (config.obs_scale / spread)

    spec = GeneratorSpec(config, mask_resp, mask_inv, theta_inv, theta_resp,
                         mixing, embed)

    mu_inv = rng.normal(scale=0.5, size=di)
    var_inv = rng.uniform(0.5 * (config.var_low + config.var_high),
                          config.var_high, size=di)
    mu0 = rng.normal(scale=0.5, size=dr)
    var0 = rng.uniform(config.var_low, config.var_high, size=dr)
    envs = [Environment("ctrl", np.zeros(dr, dtype=int), mu0, var0,
                        np.zeros(dr, dtype=bool), is_control=True)]

    # each moment-shift environment targets one responsive coordinate, mirroring
    # interventions marked by a binary target vector: for coordinate j, one
    # environment shifts its innovation mean and one scales its variance
    for attempt in range(100):
        shift_envs = []
        for j in range(dr):
            u = np.zeros(dr, dtype=int)
            u[j] = 1
            mu = mu0.copy()
            mu[j] += float(rng.choice([-1.0, 1.0])) * rng.uniform(1.5, 2.5) * config.mean_shift_scale
            shift_envs.append(Environment(f"ms{2 * j + 1}", u.copy(), mu, var0.copy(),
                                          np.zeros(dr, dtype=bool)))
            var = var0.copy()
            var[j] *= rng.uniform(8.0, 16.0)
            mu2 = mu0.copy()
            mu2[j] += rng.uniform(-0.5, 0.5) * config.mean_shift_scale
            shift_envs.append(Environment(f"ms{2 * j + 2}", u.copy(), mu2, var,
                                          np.zeros(dr, dtype=bool)))
        candidate = EnvironmentBank(mu_inv, var_inv, envs[:1] + shift_envs)
        _, ok = check_rank_condition(candidate)
        if ok:
            break
    else:
        raise ComputeError("rank condition not satisfied after 100 environment resamples")

    iso_envs = []
    for j in range(dr):
        flag = np.zeros(dr, dtype=bool)
        flag[j] = True
        u = np.zeros(dr, dtype=int)
        u[j] = 1
        iso_envs.append(Environment(f"iso{j + 1}", u, mu0.copy(), var0.copy(), flag))

    bank = EnvironmentBank(mu_inv, var_inv, envs[:1] + shift_envs + iso_envs)
    return spec, bank


def f_invariant(spec: GeneratorSpec, z_inv: np.ndarray) -> np.ndarray:
    a = spec.config.alpha
    return a * z_inv + (1.0 - a) * np.tanh(z_inv @ spec.theta_inv.T)


def f_responsive(spec: GeneratorSpec, env: Environment, z_prev: np.ndarray) -> np.ndarray:
    """Mechanism part of the responsive transition (no innovation), rows = cells."""
    base = np.tanh(z_prev @ spec.theta_resp.T)
    return np.where(env.isolated[None, :], 0.0, base)


def transition_mean(spec: GeneratorSpec, bank: EnvironmentBank, env: Environment,
                    z_prev: np.ndarray) -> np.ndarray:
    di = spec.config.d_inv
    mean_inv = f_invariant(spec, z_prev[:, :di]) + bank.mu_inv[None, :]
    mean_resp = f_responsive(spec, env, z_prev) + env.mu_resp[None, :]
    return np.concatenate([mean_inv, mean_resp], axis=1)


def mix_observations(spec: GeneratorSpec, z: np.ndarray) -> np.ndarray:
    h = z
    for w in spec.mixing_layers:
        h = h @ w.T
        h = np.where(h >= 0.0, h, LEAKY_SLOPE * h)
    return h @ spec.embed.T


def generator_score_diff(spec: GeneratorSpec, bank: EnvironmentBank, z_t: np.ndarray,
                         z_prev: np.ndarray, env_id: str,
                         baseline_id: str = "ctrl") -> tuple[np.ndarray, np.ndarray]:
    """Transition score difference under the true generator, split into blocks."""
    env = bank.by_id(env_id)
    base = bank.by_id(baseline_id)
    di = spec.config.d_inv

    def score(e: Environment) -> np.ndarray:
        mean = transition_mean(spec, bank, e, z_prev)
        var = np.concatenate([bank.var_inv, e.var_resp])
        return -(z_t - mean) / var[None, :]

    diff = score(env) - score(base)
    return diff[:, :di], diff[:, di:]


def sample_trajectories(spec: GeneratorSpec, bank: EnvironmentBank, n_per_env: int,
                        horizon: int, seed: int, unpaired: bool = False) -> TrajectoryBundle:
    """Roll the latent process forward and mix observations.

    The invariant innovation stream is drawn once and shared across
    environments (trajectory i has the same invariant path everywhere). Each
    environment's within-population law is unchanged by this, but in paired
    mode it realizes the cross-condition coupling that shares the invariant
    state, so alignment pairs can be formed by row index. Responsive
    innovations are drawn independently per environment.
    """
    config = spec.config
    di, dr = config.d_inv, config.d_resp
    latents: dict[tuple[str, int], np.ndarray] = {}
    observations: dict[tuple[str, int], np.ndarray] = {}
    origin: dict[tuple[str, int], np.ndarray] = {}
    base = bank.envs[0]

    rng_inv = spawn_rng(seed, "trajectories-invariant")
    z0_inv = bank.mu_inv[None, :] + np.sqrt(bank.var_inv)[None, :] * rng_inv.standard_normal((n_per_env, di))
    noise_inv_stream = [np.sqrt(bank.var_inv)[None, :] * rng_inv.standard_normal((n_per_env, di))
                        for _ in range(horizon)]
    z_inv_path = [z0_inv]
    for t in range(1, horizon + 1):
        z_inv_path.append(f_invariant(spec, z_inv_path[-1]) + bank.mu_inv[None, :]
                          + noise_inv_stream[t - 1])

    for env in bank.envs:
        rng = spawn_rng(seed, "trajectories", env.cond_id)
        z0_resp = base.mu_resp[None, :] + np.sqrt(base.var_resp)[None, :] * rng.standard_normal((n_per_env, dr))
        z = np.concatenate([z0_inv, z0_resp], axis=1)
        for t in range(horizon + 1):
            if t > 0:
                noise_resp = np.sqrt(env.var_resp)[None, :] * rng.standard_normal((n_per_env, dr))
                resp_mean = f_responsive(spec, env, z) + env.mu_resp[None, :]
                z = np.concatenate([z_inv_path[t], resp_mean + noise_resp], axis=1)
            latents[(env.cond_id, t)] = z.copy()
            observations[(env.cond_id, t)] = mix_observations(spec, z)
            origin[(env.cond_id, t)] = np.arange(n_per_env)

    if unpaired:
        for key in list(latents.keys()):
            rng = spawn_rng(seed, "unpair", key[0], key[1])
            perm = rng.permutation(latents[key].shape[0])
            latents[key] = latents[key][perm]
            observations[key] = observations[key][perm]
            origin[key] = origin[key][perm]
    return TrajectoryBundle(latents, observations, not unpaired, origin)


def export_dataset(bundle: TrajectoryBundle, spec: GeneratorSpec, bank: EnvironmentBank,
                   out_dir: str | Path, n_per_env: int, horizon: int, seed: int) -> None:
    from .data import save_snapshot_table  # local import to avoid a cycle

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = spec.config
    di, dr = config.d_inv, config.d_resp

    rows_cond, rows_time, rows_expr = [], [], []
    keys = sorted(bundle.observations.keys())
    for cid, t in keys:
        obs = bundle.observations[(cid, t)]
        rows_cond.extend([cid] * obs.shape[0])
        rows_time.extend([t] * obs.shape[0])
        rows_expr.append(obs)
    expression = np.concatenate(rows_expr, axis=0)
    genes = [f"g{i + 1}" for i in range(config.n_genes)]
    conditions = {
        env.cond_id: {
            "targets": [f"nu{j + 1}" for j in np.flatnonzero(env.u)],
            "is_control": env.is_control,
        }
        for env in bank.envs
    }
    save_snapshot_table(out, expression, rows_cond, rows_time, genes, conditions,
                        mode="normalized", paired=bundle.paired)

    truth_dir = out / "latents_truth"
    truth_dir.mkdir(exist_ok=True)
    header = ",".join([f"z_iota_{i + 1}" for i in range(di)]
                      + [f"z_nu_{j + 1}" for j in range(dr)])
    for cid, t in keys:
        z = bundle.latents[(cid, t)]
        lines = [header] + [",".join(repr(float(v)) for v in row) for row in z]
        (truth_dir / f"{cid}_t{t}.csv").write_text("\n".join(lines) + "\n")

    manifest = {
        "generator_config": asdict(config),
        "environments": [
            {
                "cond_id": env.cond_id,
                "u": env.u.tolist(),
                "mu_resp": env.mu_resp.tolist(),
                "var_resp": env.var_resp.tolist(),
                "isolated": env.isolated.tolist(),
                "is_control": env.is_control,
            }
            for env in bank.envs
        ],
        "mu_inv": bank.mu_inv.tolist(),
        "var_inv": bank.var_inv.tolist(),
        "n_per_env": n_per_env,
        "horizon": horizon,
        "sample_seed": seed,
        "paired": bundle.paired,
        "rank_check": dict(zip(("rank", "passed"), check_rank_condition(bank))),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def generate_dataset(config: GeneratorConfig, out_dir: str | Path,
                     unpaired: bool = False) -> tuple[GeneratorSpec, EnvironmentBank]:
    spec, bank = make_generator(config)
    bundle = sample_trajectories(spec, bank, config.n_cells, config.horizon,
                                 seed=config.seed, unpaired=unpaired)
    export_dataset(bundle, spec, bank, out_dir, config.n_cells, config.horizon,
                   config.seed)
    return spec, bank

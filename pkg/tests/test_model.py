import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdyn.errors import ValidationError
from cdyn.model import (
    GaussianDiag,
    LatentState,
    ModelConfig,
    ModelParams,
    build_condition_adjacency,
    decode,
    encode_invariant,
    encode_responsive,
    init_model_params,
    kl_diag_gaussian,
    load_model,
    reparam_sample,
    save_model,
    transition_prior,
    transition_score_diff,
)
from cdyn.rng import spawn_rng
from cdyn.tape import finite_diff_check


def small_config(**kw) -> ModelConfig:
    base = dict(d_inv=2, d_resp=3, n_genes=6, d_cond=4, d_target=4, hidden=5,
                horizon=4, conditions=["ctrl", "a", "b"])
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def params() -> ModelParams:
    return init_model_params(small_config(), seed=0)


def zero_params(config: ModelConfig) -> ModelParams:
    p = init_model_params(config, seed=0)
    return p.with_flat(np.zeros(p.n_params()))


def test_zero_network_encodes_to_standard_moments():
    p = zero_params(small_config())
    x = np.ones(6)
    q = encode_invariant(p, x)
    assert np.array_equal(q.mean, np.zeros(2))
    assert np.array_equal(q.logvar, np.zeros(2))
    qr = encode_responsive(p, x, "a", 2)
    assert np.array_equal(qr.mean, np.zeros(3))
    assert np.array_equal(qr.logvar, np.zeros(3))


def test_encoders_deterministic(params):
    x = spawn_rng(1, "x").normal(size=(4, 6))
    a = encode_invariant(params, x)
    b = encode_invariant(params, x)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.logvar, b.logvar)


def test_invariant_encoder_ignores_condition_and_time(params):
    # no code path reads (u, t); the same x gives the same posterior no matter
    # what other calls happen around it
    x = spawn_rng(2, "x").normal(size=6)
    before = encode_invariant(params, x)
    encode_responsive(params, x, "a", 0)
    encode_responsive(params, x, "b", 3)
    after = encode_invariant(params, x)
    assert np.array_equal(before.mean, after.mean)


def test_responsive_encoder_depends_only_on_embedding(params):
    emb = params.values["emb.cond"]
    emb[2] = emb[1]
    x = spawn_rng(3, "x").normal(size=6)
    qa = encode_responsive(params, x, "a", 1)
    qb = encode_responsive(params, x, "b", 1)
    assert np.array_equal(qa.mean, qb.mean) and np.array_equal(qa.logvar, qb.logvar)


def test_responsive_encoder_unknown_condition(params):
    with pytest.raises(ValidationError, match="unknown condition"):
        encode_responsive(params, np.zeros(6), "nope", 0)


def test_encode_gradient_wrt_input(params):
    """d sum(mean) / dx matches finite differences."""
    x0 = spawn_rng(4, "x").normal(size=6)

    def loss_fn(x):
        q = encode_invariant(params, x)
        eps = 1e-7
        grad = np.zeros_like(x)
        for i in range(x.size):
            up = x.copy(); up[i] += eps
            dn = x.copy(); dn[i] -= eps
            grad[i] = (encode_invariant(params, up).mean.sum()
                       - encode_invariant(params, dn).mean.sum()) / (2 * eps)
        return float(q.mean.sum()), grad

    assert finite_diff_check(loss_fn, x0, h=1e-5) <= 1e-4


def test_decode_zero_network_outputs_bias():
    p = zero_params(small_config())
    z = LatentState(np.ones(2), np.ones(3))
    assert np.array_equal(decode(p, z), np.zeros(6))


def test_decode_shared_across_batch(params):
    z = LatentState(spawn_rng(5, "zi").normal(size=(3, 2)),
                    spawn_rng(5, "zr").normal(size=(3, 3)))
    out = decode(params, z)
    row = decode(params, LatentState(z.z_inv[1], z.z_resp[1]))
    assert np.allclose(out[1], row)


def test_reparam_sample_noise_zero_returns_mean():
    q = GaussianDiag(np.array([1.0, -2.0]), np.array([0.3, -0.1]))
    assert np.array_equal(reparam_sample(q, np.zeros(2)), q.mean)


def test_reparam_sample_unit_sigma():
    q = GaussianDiag(np.zeros(2), np.zeros(2))
    assert np.array_equal(reparam_sample(q, np.array([1.0, -1.0])), np.array([1.0, -1.0]))


def test_reparam_sample_monte_carlo_variance():
    rng = spawn_rng(6, "mc")
    q = GaussianDiag(np.array([0.5]), np.array([0.7]))
    draws = np.array([reparam_sample(q, rng.standard_normal(1))[0] for _ in range(0)])
    noise = rng.standard_normal(1_000_000)
    draws = q.mean[0] + np.exp(0.5 * q.logvar[0]) * noise
    var = draws.var()
    se = np.exp(q.logvar[0]) * np.sqrt(2.0 / (draws.size - 1))
    assert abs(var - np.exp(q.logvar[0])) <= 3 * se


def test_kl_same_distribution_is_zero():
    q = GaussianDiag(np.array([0.3, -1.0]), np.array([0.2, 0.1]))
    assert kl_diag_gaussian(q, q) == 0.0


def test_kl_known_values():
    q = GaussianDiag(np.array([0.0]), np.array([0.0]))
    p = GaussianDiag(np.array([1.0]), np.array([0.0]))
    assert kl_diag_gaussian(q, p) == pytest.approx(0.5, abs=1e-12)
    q2 = GaussianDiag(np.array([0.0]), np.array([np.log(4.0)]))
    p2 = GaussianDiag(np.array([0.0]), np.array([0.0]))
    assert kl_diag_gaussian(q2, p2) == pytest.approx(0.806853, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_kl_nonnegative_random_pairs(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 6))
    q = GaussianDiag(rng.normal(size=d), rng.normal(size=d))
    p = GaussianDiag(rng.normal(size=d), rng.normal(size=d))
    assert kl_diag_gaussian(q, p) >= -1e-12


def test_adjacency_zero_params_is_zero():
    p = zero_params(small_config())
    assert np.array_equal(build_condition_adjacency(p, "a").w, np.zeros((3, 3)))


def test_adjacency_single_coordinate_degenerate():
    p = init_model_params(small_config(d_resp=1), seed=3)
    assert np.array_equal(build_condition_adjacency(p, "a").w, np.zeros((1, 1)))


def test_adjacency_strictly_lower_for_all_conditions(params):
    for cid in params.config.conditions:
        w = build_condition_adjacency(params, cid).w
        assert np.array_equal(np.triu(w), np.zeros_like(w))
        assert np.all(np.abs(w) < 1.0)


def test_transition_prior_invariant_head_ignores_condition_and_resp(params):
    rng = spawn_rng(7, "z")
    z_inv = rng.normal(size=(4, 2))
    base = transition_prior(params, LatentState(z_inv, rng.normal(size=(4, 3))), "a")
    for cid in ("ctrl", "b"):
        other = transition_prior(params, LatentState(z_inv, rng.normal(size=(4, 3))), cid)
        assert np.array_equal(base[0].mean, other[0].mean)
        assert np.array_equal(base[0].logvar, other[0].logvar)


def test_transition_prior_gating_blocks_resp_parents(params):
    # zero gate => responsive head independent of z_resp, bit-identical
    params.values["adj.base"][:] = 0.0
    params.values["adj.mod"][:] = 0.0
    rng = spawn_rng(8, "z")
    z_inv = rng.normal(size=(2, 2))
    a = transition_prior(params, LatentState(z_inv, rng.normal(size=(2, 3))), "a")
    b = transition_prior(params, LatentState(z_inv, rng.normal(size=(2, 3))), "a")
    assert np.array_equal(a[1].mean, b[1].mean)
    assert np.array_equal(a[1].logvar, b[1].logvar)


def test_score_diff_zero_for_same_environment(params):
    rng = spawn_rng(9, "z")
    z_t = LatentState(rng.normal(size=2), rng.normal(size=3))
    z_prev = LatentState(rng.normal(size=2), rng.normal(size=3))
    d_inv, d_resp = transition_score_diff(params, z_t, z_prev, "a", "a")
    assert np.array_equal(d_inv, np.zeros(2))
    assert np.array_equal(d_resp, np.zeros(3))


def test_score_diff_invariant_block_zero_across_environments(params):
    rng = spawn_rng(10, "z")
    z_t = LatentState(rng.normal(size=2), rng.normal(size=3))
    z_prev = LatentState(rng.normal(size=2), rng.normal(size=3))
    d_inv, d_resp = transition_score_diff(params, z_t, z_prev, "b", "ctrl")
    assert np.array_equal(d_inv, np.zeros(2))
    assert not np.allclose(d_resp, 0.0)


def test_serialization_roundtrip_bit_exact(tmp_path, params):
    path = tmp_path / "model.json"
    save_model(params, path)
    loaded = load_model(path)
    assert loaded.config == params.config
    for name in params.values:
        assert np.array_equal(loaded.values[name], params.values[name]), name

import numpy as np
import pytest

from cdyn.data import (
    CondInfo,
    RunConfig,
    SnapshotDataset,
    build_loo_folds,
    build_pair_batches,
    build_de_mask,
    load_matrix_binary,
    load_run_config,
    load_snapshot_table,
    normalize_counts,
    save_dataset,
    save_matrix_binary,
    save_run_config,
    select_hvg,
    top_k_indices,
)
from cdyn.errors import ValidationError
from cdyn.rng import spawn_rng


def toy_dataset(mode="normalized", n_per_group=4, conditions=("ctrl", "a", "b", "c"),
                times=(0, 1, 2), n_genes=6, seed=0) -> SnapshotDataset:
    rng = spawn_rng(seed, "toy")
    rows, conds, ts = [], [], []
    for cid in conditions:
        for t in times:
            block = rng.uniform(0, 5, size=(n_per_group, n_genes))
            if mode == "counts":
                block = np.floor(block)
            rows.append(block)
            conds.extend([cid] * n_per_group)
            ts.extend([t] * n_per_group)
    info = {cid: CondInfo([], cid == "ctrl") for cid in conditions}
    n = len(conds)
    return SnapshotDataset(np.concatenate(rows), conds, np.array(ts),
                           [f"g{i}" for i in range(n_genes)], info, mode,
                           [f"c{i}" for i in range(n)])


def test_roundtrip_bit_exact(tmp_path):
    ds = toy_dataset()
    save_dataset(ds, tmp_path)
    loaded = load_snapshot_table(tmp_path)
    assert np.array_equal(loaded.expression, ds.expression)
    assert loaded.condition == ds.condition
    assert np.array_equal(loaded.time, ds.time)
    assert loaded.genes == ds.genes
    assert loaded.cell_ids == ds.cell_ids
    assert loaded.mode == ds.mode


def test_two_cell_fixture_roundtrip(tmp_path):
    ds = SnapshotDataset(np.array([[1.25, 0.0], [3.5, 2.125]]), ["ctrl", "a"],
                         np.array([0, 0]), ["g1", "g2"],
                         {"ctrl": CondInfo([], True), "a": CondInfo(["g1"], False)},
                         "normalized", ["x", "y"])
    save_dataset(ds, tmp_path)
    loaded = load_snapshot_table(tmp_path)
    assert np.array_equal(loaded.expression, ds.expression)
    assert loaded.conditions["a"].targets == ["g1"]


def test_unknown_condition_row_names_row():
    with pytest.raises(ValidationError, match="row 1"):
        SnapshotDataset(np.zeros((2, 2)), ["ctrl", "ghost"], np.zeros(2, dtype=int),
                        ["g1", "g2"], {"ctrl": CondInfo([], True)}, "normalized",
                        ["a", "b"])


def test_duplicate_genes_rejected():
    with pytest.raises(ValidationError, match="duplicate"):
        SnapshotDataset(np.zeros((1, 2)), ["ctrl"], np.zeros(1, dtype=int),
                        ["g", "g"], {"ctrl": CondInfo([], True)}, "normalized", ["a"])


def test_negative_counts_rejected():
    with pytest.raises(ValidationError, match="negative"):
        SnapshotDataset(np.array([[-1.0]]), ["ctrl"], np.zeros(1, dtype=int),
                        ["g"], {"ctrl": CondInfo([], True)}, "counts", ["a"])


def test_missing_manifest_errors(tmp_path):
    (tmp_path / "snapshot.csv").write_text("cell_id,condition,time,g\n")
    with pytest.raises(ValidationError, match="manifest"):
        load_snapshot_table(tmp_path)


def test_normalize_counts_forced_arithmetic():
    ds = toy_dataset(mode="counts", n_genes=2, n_per_group=1)
    ds.expression[:] = 1.0
    out = normalize_counts(ds)
    assert np.allclose(out.expression, np.log1p(5000.0))
    assert out.mode == "normalized"


def test_normalize_counts_zero_gene_column_stays_zero():
    ds = toy_dataset(mode="counts")
    ds.expression[:, 3] = 0.0
    ds.expression[:, 0] += 1.0  # keep library sizes positive
    out = normalize_counts(ds)
    assert np.all(out.expression[:, 3] == 0.0)


def test_normalize_counts_row_sums_hit_target():
    ds = toy_dataset(mode="counts", n_per_group=30, n_genes=9, seed=3)
    ds.expression += 1.0
    out = normalize_counts(ds)
    recovered = np.expm1(out.expression).sum(axis=1)
    assert np.all(np.abs(recovered - 10_000.0) <= 1e-6)


def test_normalize_counts_drops_zero_cells_and_reports():
    ds = toy_dataset(mode="counts")
    ds.expression[5] = 0.0
    out = normalize_counts(ds)
    assert out.norm_dropped_cells == 1
    assert out.expression.shape[0] == ds.expression.shape[0] - 1


def test_normalize_counts_rejects_normalized_mode():
    ds = toy_dataset(mode="normalized")
    with pytest.raises(ValidationError):
        normalize_counts(ds)


def test_hvg_identity_when_k_equals_gene_count():
    ds = toy_dataset()
    mask = np.ones(len(ds.condition), dtype=bool)
    assert np.array_equal(select_hvg(ds, mask, ds.n_genes), np.arange(ds.n_genes))


def test_hvg_excludes_constant_gene():
    ds = toy_dataset()
    ds.expression[:, 2] = 1.0
    mask = np.ones(len(ds.condition), dtype=bool)
    chosen = select_hvg(ds, mask, ds.n_genes - 1)
    assert 2 not in chosen


def test_hvg_matches_sort_oracle():
    ds = toy_dataset(seed=7, n_genes=12)
    mask = np.asarray(ds.time) <= 1
    k = 5
    chosen = select_hvg(ds, mask, k)
    var = ds.expression[mask].var(axis=0)
    oracle = sorted(sorted(range(12), key=lambda g: (-var[g], g))[:k])
    assert np.array_equal(chosen, np.array(oracle))


def test_top_k_tie_break_ascending_index():
    vals = np.array([1.0, 3.0, 3.0, 0.5])
    assert np.array_equal(top_k_indices(vals, 2), np.array([1, 2]))
    assert np.array_equal(top_k_indices(vals, 3), np.array([1, 2, 0]))


def test_loo_folds_structure():
    ds = toy_dataset()
    folds = build_loo_folds(ds, k_top=2)
    assert [f.held_out for f in folds] == ["a", "b", "c"]
    for fold in folds:
        assert fold.held_out not in fold.training
        assert "ctrl" in fold.training
        assert len(fold.training) == 3


def test_loo_folds_require_two_perturbations():
    ds = toy_dataset(conditions=("ctrl", "a"))
    with pytest.raises(ValidationError):
        build_loo_folds(ds, k_top=2)


def test_de_mask_matches_bruteforce_and_ignores_heldout():
    ds = toy_dataset(seed=9)
    folds = build_loo_folds(ds, k_top=2)
    fold = folds[0]
    expected = np.zeros(ds.n_genes, dtype=bool)
    for cid in fold.training:
        if cid == "ctrl":
            continue
        for t in ds.times_for(cid):
            delta = np.abs(ds.pseudobulk(cid, t) - ds.pseudobulk("ctrl", t))
            order = sorted(range(ds.n_genes), key=lambda g: (-delta[g], g))[:2]
            expected[order] = True
    assert np.array_equal(fold.de_mask, expected)

    # deleting held-out cells changes nothing: the mask is training-only
    keep = np.asarray(ds.condition) != fold.held_out
    trimmed = SnapshotDataset(ds.expression[keep],
                              [c for c, k in zip(ds.condition, keep) if k],
                              ds.time[keep], ds.genes, ds.conditions, ds.mode,
                              [c for c, k in zip(ds.cell_ids, keep) if k])
    recomputed = build_de_mask(trimmed, fold.training, 2)
    assert np.array_equal(recomputed, fold.de_mask)


def test_pair_batches_deterministic_and_in_bounds():
    ds = toy_dataset(n_per_group=6)
    a, _ = build_pair_batches(ds, None, "independent", batch_size=5, seed=3, epoch=2)
    b, _ = build_pair_batches(ds, None, "independent", batch_size=5, seed=3, epoch=2)
    assert len(a) == len(b) == 4 * 2  # 4 conditions x 2 transitions
    for (pa, al_a), (pb, al_b) in zip(a, b):
        assert np.array_equal(pa.x_prev, pb.x_prev)
        assert np.array_equal(pa.x_curr, pb.x_curr)
        if al_a is None:
            assert al_b is None
        else:
            assert np.array_equal(al_a.x_pert, al_b.x_pert)


def test_pair_batches_skip_missing_timepoint():
    ds = toy_dataset(n_per_group=3)
    keep = ~((np.asarray(ds.condition) == "a") & (ds.time == 1))
    ds2 = SnapshotDataset(ds.expression[keep],
                          [c for c, k in zip(ds.condition, keep) if k],
                          ds.time[keep], ds.genes, ds.conditions, ds.mode,
                          [c for c, k in zip(ds.cell_ids, keep) if k])
    steps, skipped = build_pair_batches(ds2, None, "independent", batch_size=4, seed=0)
    assert any("a" in s for s in skipped)
    conds_with_pairs = {p.condition_id for p, _ in steps}
    assert "a" not in conds_with_pairs


def test_pair_batches_singleton_groups():
    ds = toy_dataset(n_per_group=1)
    steps, _ = build_pair_batches(ds, None, "independent", batch_size=3, seed=0)
    for pair, align in steps:
        assert np.all(pair.x_prev == pair.x_prev[0])
        if align is not None:
            assert np.all(align.x_ctrl == align.x_ctrl[0])


def test_pair_batch_temporal_marginals_uniform():
    ds = toy_dataset(n_per_group=10)
    counts = np.zeros(10)
    total = 0
    group = list(ds.group_rows("a", 0))
    for epoch in range(200):
        steps, _ = build_pair_batches(ds, ["a"], "independent", batch_size=25,
                                      seed=1, epoch=epoch)
        pair, _ = steps[0]
        for row in pair.x_prev:
            idx = np.where((ds.expression == row).all(axis=1))[0][0]
            counts[group.index(idx)] += 1
        total += 25
    p = 1.0 / 10
    se = np.sqrt(total * p * (1 - p))
    assert np.all(np.abs(counts - total * p) <= 4 * se)


def test_run_config_roundtrip(tmp_path):
    cfg = RunConfig()
    cfg.training.epochs = 7
    cfg.generator = {"d_inv": 2, "seed": 5}
    path = tmp_path / "config.json"
    save_run_config(cfg, path)
    loaded = load_run_config(path)
    assert loaded.training.epochs == 7
    assert loaded.generator["seed"] == 5


def test_run_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "config.json"
    path.write_text('{"training": {"nope": 1}}')
    with pytest.raises(ValidationError, match="unknown keys"):
        load_run_config(path)


def test_binary_matrix_roundtrip(tmp_path):
    rng = spawn_rng(20, "bin")
    mat = rng.normal(size=(7, 3))
    path = tmp_path / "m.cdyn1"
    save_matrix_binary(path, mat)
    assert np.array_equal(load_matrix_binary(path), mat)
    assert path.read_bytes()[:5] == b"CDYN1"
    with pytest.raises(ValidationError):
        save_matrix_binary(path, mat)
        (tmp_path / "bad.bin").write_bytes(b"XXXXX" + b"\0" * 8)
        load_matrix_binary(tmp_path / "bad.bin")

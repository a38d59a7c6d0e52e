"""Command line: generate, train, predict, evaluate, gradcheck, diagnose.

Configuration comes from a single JSON file; flags override file values, and
the CDYN_SEED environment variable overrides the config seed when no --seed
flag is given. Exit codes: 0 success, 1 validation error, 2 runtime error;
failures print one structured JSON line to stderr. Identical inputs and seeds
produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    RunConfig,
    load_run_config,
    load_snapshot_table,
    load_truth_latents,
    save_run_config,
)
from .errors import ComputeError, ValidationError
from .losses import AlignBatch, PairBatch
from .model import ModelConfig, init_model_params, load_model, save_model
from .pipeline import diagnose_score_alignment, evaluate_loo, map_condition, metrics_csv_lines, rollout
from .rng import spawn_rng
from .synthgen import GeneratorConfig, check_rank_condition, generate_dataset
from .tape import finite_diff_check
from .train import ABLATION_CHOICES, train_model


def _resolve_seed(args, config: RunConfig) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("CDYN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"CDYN_SEED must be an integer, got {env!r}") from None
    return config.seed


def _apply_overrides(args, config: RunConfig) -> RunConfig:
    config.seed = _resolve_seed(args, config)
    for flag, section, name in (
        ("epochs", "training", "epochs"),
        ("batch_size", "training", "batch_size"),
        ("lr", "training", "lr"),
        ("lam_align", "training", "lam_align"),
        ("lam_reg", "training", "lam_reg"),
        ("coupling", "training", "coupling"),
        ("crossfit", "training", "crossfit"),
        ("hidden", "model", "hidden"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(config, section), name, value)
    config.validate()
    return config


def cmd_generate(args) -> int:
    config = _apply_overrides(args, load_run_config(args.config))
    gen_kwargs = dict(config.generator)
    gen_kwargs["seed"] = config.seed
    gen_config = GeneratorConfig(**gen_kwargs)
    out = Path(args.out)
    _, bank = generate_dataset(gen_config, out, unpaired=args.unpaired)
    rank, passed = check_rank_condition(bank)
    save_run_config(config, out / "config.json")
    print(f"generated {out}: {len(bank.envs)} environments, "
          f"rank check {rank}/{2 * gen_config.d_resp} ({'pass' if passed else 'FAIL'})")
    print(f"reports: {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    config = _apply_overrides(args, load_run_config(args.config))
    ds = load_snapshot_table(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as log_file:
        result = train_model(ds, config, ablate=args.ablate,
                             log_sink=lambda entry: log_file.write(json.dumps(entry) + "\n"))
    model_path = out / "model.json"
    save_model(result.params, model_path)
    save_run_config(config, out / "config.json")
    print(f"trained {result.steps} steps, final total {result.final_total:.6f}")
    print(f"model: {model_path}")
    print(f"log: {log_path}")
    return 0


def cmd_predict(args) -> int:
    if args.horizon <= 0:
        raise ValidationError("predict: horizon must be positive")
    params = load_model(args.model)
    ds = load_snapshot_table(args.data)
    model_cid, mapped = map_condition(params, ds, args.condition)
    times = ds.times_for(args.condition) or ds.times_for(model_cid)
    if not times:
        raise ValidationError(f"no cells available to seed prediction for {args.condition!r}")
    t_start = max(times)
    source_cid = args.condition if ds.times_for(args.condition) else model_cid
    x_start = ds.expression[ds.group_rows(source_cid, t_start)]
    seed = args.seed if args.seed is not None else int(os.environ.get("CDYN_SEED", "0"))
    preds = rollout(params, x_start, model_cid, min(t_start, params.config.horizon),
                    args.horizon, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    offset = t_start - min(t_start, params.config.horizon)
    for t_model, cells in preds.items():
        t_data = t_model + offset
        header = ",".join(ds.genes)
        lines = [header] + [",".join(repr(float(v)) for v in row) for row in cells]
        (out / f"pred_{args.condition}_t{t_data}.csv").write_text("\n".join(lines) + "\n")
    summary = {
        "condition": args.condition,
        "mapped_condition": model_cid if mapped else None,
        "unseen_condition": mapped,
        "t_start": int(t_start),
        "horizon": args.horizon,
        "files": sorted(p.name for p in out.glob(f"pred_{args.condition}_t*.csv")),
    }
    (out / f"pred_{args.condition}_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(json.dumps(summary))
    return 0


def cmd_evaluate(args) -> int:
    config = _apply_overrides(args, load_run_config(args.config))
    ds = load_snapshot_table(args.data)
    k_top = args.K if args.K is not None else config.evaluation.de_top_k
    if k_top >= ds.n_genes:
        raise ValidationError(f"K={k_top} must be smaller than the gene count {ds.n_genes}")
    truth = load_truth_latents(args.data, ds)
    predictions = None
    if args.pred is not None:
        predictions = _load_predictions(Path(args.pred), ds)
        params = load_model(args.model) if args.model else _passthrough_params(ds)
    else:
        if args.model is None:
            raise ValidationError("evaluate: provide --model or --pred")
        params = load_model(args.model)
    report = evaluate_loo(params, ds, k_top, config.seed,
                          hvg_k=config.evaluation.hvg_k,
                          max_folds=args.folds,
                          truth=truth,
                          probe_epochs=config.evaluation.probe_epochs,
                          probe_max_rows=config.evaluation.probe_max_rows,
                          predictions=predictions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    (out / "metrics.csv").write_text("\n".join(metrics_csv_lines(report)) + "\n")
    recovered = report["recovery"]
    if recovered is None:
        print("recovery metrics: absent (no ground-truth latents)")
    else:
        print(f"recovery: mcc_nu={recovered['mcc_nu']:.4f} "
              f"linear_r2_inv={['%.4f' % v for v in recovered['linear_r2_inv']]} "
              f"probe_r2={recovered['probe_r2_mean']:.4f} "
              f"probe_spearman={recovered['probe_spearman_mean']:.4f}")
    for row in report["folds"]:
        print(f"fold {row['held_out']}: r2={row['pseudobulk_r2_all']:.4f} "
              f"rmse={row['rmse_all']:.4f} mae={row['mae_all']:.4f} "
              f"dP={row['delta_pearson_all']:.4f} auc={row['auc_roc_all']:.4f} "
              f"auprc={row['auprc_all']:.4f}")
    print(f"reports: {out / 'metrics.json'}, {out / 'metrics.csv'}")
    return 0


def _passthrough_params(ds):
    config = ModelConfig(n_genes=ds.n_genes, conditions=ds.condition_ids())
    return init_model_params(config, seed=0)


def _load_predictions(pred_dir: Path, ds) -> dict[str, dict[int, np.ndarray]]:
    import pandas as pd

    if not pred_dir.exists():
        raise ValidationError(f"prediction directory {pred_dir} not found")
    out: dict[str, dict[int, np.ndarray]] = {}
    for f in sorted(pred_dir.glob("pred_*_t*.csv")):
        stem = f.stem[len("pred_"):]
        cid, t_part = stem.rsplit("_t", 1)
        frame = pd.read_csv(f, float_precision="round_trip")
        out.setdefault(cid, {})[int(t_part)] = frame.to_numpy(dtype=np.float64)
    if not out:
        raise ValidationError(f"no pred_<condition>_t<t>.csv files under {pred_dir}")
    return out


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise ValidationError("gradcheck: trials must be >= 1")
    config = _apply_overrides(args, load_run_config(args.config))
    worst = 0.0
    worst_where = ""
    for trial in range(args.trials):
        rng = spawn_rng(config.seed, "gradcheck", trial)
        hidden = int(rng.integers(4, 7))
        conditions = ["ctrl", "p1", "p2"]
        mc = ModelConfig(d_inv=2, d_resp=3, n_genes=20, d_cond=4, d_target=4,
                         hidden=hidden, horizon=4, conditions=conditions)
        params = init_model_params(mc, seed=int(rng.integers(2 ** 31)))
        b = 8
        pair = PairBatch(rng.normal(size=(b, mc.n_genes)), rng.normal(size=(b, mc.n_genes)),
                         "p1", int(rng.integers(1, 5)))
        align = AlignBatch(rng.normal(size=(b, mc.n_genes)), rng.normal(size=(b, mc.n_genes)),
                           "p1", pair.t_curr)
        from .losses import build_total_loss_tape

        tape, _ = build_total_loss_tape(params, pair, align,
                                        lam_align=float(rng.uniform(0.1, 2.0)),
                                        lam_reg=float(rng.uniform(0.001, 0.1)),
                                        seed=int(rng.integers(2 ** 31)), control_id="ctrl")

        def loss_fn(p):
            return tape.forward(p), tape.backward()

        err = finite_diff_check(loss_fn, params.flatten(), h=1e-5)
        print(f"trial {trial}: hidden={hidden} params={params.n_params()} "
              f"max_rel_err={err:.3e}")
        if err > worst:
            worst, worst_where = err, f"trial {trial}"
    print(f"worst max_rel_err {worst:.3e} ({worst_where})")
    if worst > 1e-4:
        print(json.dumps({"error": f"gradient check failed: {worst:.3e} at {worst_where}",
                          "kind": "validation"}), file=sys.stderr)
        return 1
    return 0


def cmd_diagnose(args) -> int:
    params = load_model(args.model)
    ds = load_snapshot_table(args.data)
    seed = args.seed if args.seed is not None else int(os.environ.get("CDYN_SEED", "0"))
    report = diagnose_score_alignment(params, ds, seed)
    out = Path(args.out) if args.out else None
    text = json.dumps(report, indent=1, sort_keys=True)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(f"report: {out}")
    print(f"overall mean||d_inv|| / mean||d_resp|| = {report['overall_ratio']:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdyn",
                                     description="latent dynamical causal modeling pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_seed(p):
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--unpaired", action="store_true")
    add_seed(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model on a snapshot dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", choices=ABLATION_CHOICES, default="none")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lam-align", dest="lam_align", type=float, default=None)
    p.add_argument("--lam-reg", dest="lam_reg", type=float, default=None)
    p.add_argument("--coupling", choices=["independent", "sinkhorn", "index", "auto"], default=None)
    p.add_argument("--crossfit", choices=["independent", "sinkhorn", "index", "auto"], default=None)
    p.add_argument("--hidden", type=int, default=None)
    add_seed(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="roll the transition prior forward")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--condition", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--out", required=True)
    add_seed(p)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="leave-one-out metric battery")
    p.add_argument("--model", default=None)
    p.add_argument("--pred", default=None, help="directory of pred_<cond>_t<t>.csv files")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=None, help="evaluate only the first N folds")
    p.add_argument("--K", type=int, default=None, help="DE top-K")
    add_seed(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training objective")
    p.add_argument("--config", default=None)
    p.add_argument("--trials", type=int, default=20)
    add_seed(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("diagnose", help="score-difference alignment diagnostic")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    add_seed(p)
    p.set_defaults(fn=cmd_diagnose)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(json.dumps({"error": str(exc), "kind": "validation"}), file=sys.stderr)
        return 1
    except ComputeError as exc:
        print(json.dumps({"error": str(exc), "kind": "runtime"}), file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())

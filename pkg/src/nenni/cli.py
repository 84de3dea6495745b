"""Command-line interface.

Subcommands: train, distill, finetune, attack, eval, cost, jll-check, run.
Configs are JSON; reports land in --out as JSON + CSV with figures rendered
alongside; models use the NENN binary format; datasets are IDX files or the
seeded synthetic generator.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import harness
from .attacks import run_attack
from .costmodel import resnet18_cifar_dims, structured_cost_table
from .data import save_adversarial_idx
from .harness import (
    ExperimentConfig,
    SeedStream,
    _needs_stream,
    _resolve_inj,
    accuracy,
    adversarial_train,
    distill_approx,
    evaluate,
    finetune,
    load_config,
    load_dataset,
    run_experiment,
)
from .modelio import load_model, save_model
from .projection import preservation_stats
from .report import write_attacks_csv, write_cost_outputs, write_jll_outputs, write_json


def _get_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(args.seed))
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _get_config(args)
    out = _out_dir(args)
    model = adversarial_train(cfg)
    path = out / "model_baseline.nenn"
    save_model(model, path)
    print(f"trained baseline saved to {path}")
    return 0


def cmd_distill(args) -> int:
    cfg = _get_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    distilled, reports = distill_approx(model, cfg)
    path = out / "model_distilled.nenn"
    save_model(distilled, path)
    doc = {
        lid: {"mse_pre_quant": r.mse_pre_quant, "mse_post_quant": r.mse_post_quant}
        for lid, r in reports.items()
    }
    write_json(doc, out / "distill_report.json")
    for lid, entry in doc.items():
        print(f"{lid}: mse_pre={entry['mse_pre_quant']:.4e} mse_post={entry['mse_post_quant']:.4e}")
    print(f"distilled model saved to {path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _get_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    tuned = finetune(model, cfg)
    path = out / "model_finetuned.nenn"
    save_model(tuned, path)
    print(f"fine-tuned model saved to {path}")
    return 0


def cmd_attack(args) -> int:
    cfg = _get_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    data = load_dataset(cfg)
    _, _, xte, yte = data
    inj = _resolve_inj(model, cfg)
    seed = cfg.eval.seeds[0] if cfg.eval.seeds else 0
    rows = []
    for ai, atk in enumerate(cfg.attacks):
        stream = SeedStream(seed, f"attack{ai}") if _needs_stream(inj) else None
        x_adv = run_attack(model, xte, yte, atk, inj=inj, stream=stream, seed=seed)
        eval_stream = SeedStream(seed, "eval") if _needs_stream(inj) else None
        acc = accuracy(model, x_adv, yte, inj, stream=eval_stream)
        rows.append(
            {
                "label": atk.label,
                "kind": atk.kind,
                "epsilon": atk.epsilon,
                "steps": atk.steps,
                "robust_accuracy": acc,
                "per_seed": [acc],
            }
        )
        print(f"{atk.label}: robust accuracy {acc:.4f}")
        if args.dump_adv:
            save_adversarial_idx(out / f"adversarial_{atk.label}.idx", x_adv)
    write_attacks_csv(rows, out / "attacks.csv")
    print(f"attack results written to {out / 'attacks.csv'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _get_config(args)
    out = _out_dir(args)
    model = load_model(args.model)
    report = evaluate(model, cfg)
    doc = report.to_dict()
    from .report import write_metrics_csv

    write_json(doc, out / "report.json")
    write_metrics_csv(doc, out / "metrics.csv")
    write_attacks_csv(doc["attacks"], out / "attacks.csv")
    print(f"clean accuracy {report.clean_accuracy:.4f}")
    for row in doc["attacks"]:
        print(f"{row['label']}: robust accuracy {row['robust_accuracy']:.4f}")
    print(f"report written to {out / 'report.json'}")
    return 0


def cmd_cost(args) -> int:
    out = _out_dir(args)
    patterns = [p.strip() for p in args.patterns.split(",") if p.strip()]
    if args.model:
        cfg = _get_config(args)
        model = load_model(args.model)
        dims = harness.dims_from_model_cfg(model, cfg)
        source = args.model
    else:
        dims = resnet18_cifar_dims()
        source = "resnet18-cifar fixture"
    rows = structured_cost_table(dims, patterns)
    write_cost_outputs(rows, out)
    print(f"cost accounting for {source}:")
    for label, _, rep in rows:
        print(f"  {label:>8}: total {rep.grand_total:.4e} BitOps, reduction {rep.reduction*100:.2f}%")
    print(f"written to {out / 'cost.csv'}")
    return 0


def cmd_jll_check(args) -> int:
    out = _out_dir(args)
    ks = [int(v) for v in args.k.split(",")]
    rows = []
    for k in ks:
        stats = preservation_stats(
            k, args.d, args.s, n_points=args.points, eps=args.eps, seed=args.seed or 0
        )
        rows.append({"k": k, **stats})
        print(
            f"k={k:>5}: norm_ok {stats['norm_ok_fraction']:.4f}  "
            f"ip_violations {stats['ip_violation_fraction']:.4f}  "
            f"ip_rel_err {stats['ip_mean_abs_rel_err']:.4f}"
        )
    write_jll_outputs(rows, out)
    print(f"written to {out / 'jll_check.csv'}")
    return 0


def cmd_run(args) -> int:
    cfg = _get_config(args)
    out = _out_dir(args)
    report = run_experiment(cfg, out)
    method = report["method"]
    print(f"clean accuracy {method['clean_accuracy']:.4f}")
    for label, value in method["robust_accuracy"].items():
        improvement = report["improvement"].get(label)
        extra = f" (improvement {improvement:+.4f})" if improvement is not None else ""
        print(f"{label}: robust accuracy {value:.4f}{extra}")
    print(f"report bundle written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nenni",
        description="Noise injection into non-essential neurons: desk-scale "
        "training, attacks, cost accounting, and diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model_required=False):
        p.add_argument("--config", type=str, default=None, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=str, default=None, help="output directory (default ./out)")
        if model_required is not None:
            p.add_argument(
                "--model", type=str, required=model_required, help="NENN model file path"
            )

    common(sub.add_parser("train", help="adversarially train the baseline"), model_required=None)
    common(sub.add_parser("distill", help="fit and attach approximation params"), True)
    common(sub.add_parser("finetune", help="1-epoch injection-aware fine-tune"), True)
    p_attack = sub.add_parser("attack", help="run the configured attacks")
    common(p_attack, True)
    p_attack.add_argument(
        "--dump-adv", action="store_true", help="dump adversarial examples as float32 IDX"
    )
    common(sub.add_parser("eval", help="full evaluation report for a model"), True)
    p_cost = sub.add_parser("cost", help="BitOps accounting (fixture or model)")
    common(p_cost, False)
    p_cost.add_argument(
        "--patterns",
        type=str,
        default="0.1,0.5,0.8,0.9,0.99,1:8,4:8,7:8",
        help="comma-separated ratios and injected:group patterns",
    )
    p_jll = sub.add_parser("jll-check", help="Monte-Carlo distance-preservation check")
    p_jll.add_argument("--config", type=str, default=None, help=argparse.SUPPRESS)
    p_jll.add_argument("--seed", type=int, default=0)
    p_jll.add_argument("--out", type=str, default=None)
    p_jll.add_argument("--d", type=int, default=512)
    p_jll.add_argument("--k", type=str, default="8,32,128,256,512")
    p_jll.add_argument("--s", type=int, default=3)
    p_jll.add_argument("--points", type=int, default=50)
    p_jll.add_argument("--eps", type=float, default=0.3)
    common(sub.add_parser("run", help="full pipeline: train/distill/finetune/eval"), model_required=None)
    return parser


_HANDLERS = {
    "train": cmd_train,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "cost": cmd_cost,
    "jll-check": cmd_jll_check,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return _HANDLERS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

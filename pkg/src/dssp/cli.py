"""Command-line surface.

Every run prints its effective configuration and digest up front, so any
reported number can be reproduced from the log line alone.  Exit codes:
0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import envs, evaluation, gradcheck, model, persist, theory, training
from .config import TrainConfig, config_digest, format_config, load_preset, parse_config
from .numcore import DsspError


def _print_config(cfg: TrainConfig) -> None:
    for line in format_config(cfg).rstrip().split("\n"):
        print(f"config: {line}")
    print(f"config: digest = {config_digest(cfg)}")


def _write(path: str | None, text: str) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {path}")
    else:
        sys.stdout.write(text)


def cmd_gen_demos(args) -> int:
    demos = envs.generate_demos(args.env, args.n, args.seed)
    persist.save_dataset(args.out, demos)
    lengths = [t.length for t in demos]
    print(f"wrote {args.out}: {len(demos)} {args.env} demos, "
          f"mean length {np.mean(lengths):.1f}")
    return 0


def cmd_train(args) -> int:
    overrides = {}
    if args.demos:
        overrides["demos"] = args.demos
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.variant:
        overrides["variant"] = args.variant
    cfg = parse_config(args.config, overrides)
    _print_config(cfg)
    result = training.train(cfg)
    for row in result.logs:
        print(f"step {row.step:6d}  l_diff {row.l_diff:.6f}  l_dyn {row.l_dyn:.6f}  "
              f"lr {row.lr:.2e}")
    persist.save_checkpoint(args.out, result.params, cfg)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    params, cfg = persist.load_checkpoint(args.ckpt, force=args.force)
    if args.env and args.env != cfg.env:
        raise DsspError(f"checkpoint was trained on '{cfg.env}', not '{args.env}'")
    _print_config(cfg)
    report = evaluation.evaluate_params(params, cfg, args.episodes, args.seed,
                                        args.sigma, perturb_history=args.perturb_history)
    print(f"success_rate {report.success_rate:.4f} ({report.successes}/{report.episodes}), "
          f"mean length {report.mean_episode_length:.1f}, sigma {report.sigma}")
    _write(args.csv, evaluation.eval_report_csv([report]))
    return 0


def cmd_bench(args) -> int:
    params, cfg = persist.load_checkpoint(args.ckpt, force=args.force)
    _print_config(cfg)
    lengths = [int(x) for x in args.lengths.split(",")]
    rows = evaluation.bench_encoding(params, cfg, lengths, mode=args.mode,
                                     encoder=args.encoder, iterations=args.iterations)
    for r in rows:
        print(f"{r.encoder}/{r.mode} T_h={r.history_length:5d}  "
              f"p95 {r.p95_latency_ms:8.3f} ms  peak {r.peak_memory_bytes:10d} B")
    _write(args.csv, evaluation.bench_rows_csv(rows, config_digest(cfg)))
    return 0


def cmd_ablate(args) -> int:
    cfg = parse_config(args.config)
    _print_config(cfg)
    variants = args.variants.split(",")
    demos = persist.load_dataset(cfg.demos).trajectories
    rows = evaluation.run_ablation(cfg, variants, demos, episodes=args.episodes)
    for r in rows:
        print(f"{r.variant:14s} success {r.success_rate:.4f} "
              f"l_diff {r.final_l_diff:.4f} l_dyn {r.final_l_dyn:.4f}")
    _write(args.csv, evaluation.ablation_rows_csv(rows, config_digest(cfg)))
    return 0


def cmd_verify_theory(args) -> int:
    if args.model:
        m = theory.load_model(args.model)
    else:
        m = theory.builtin_model(args.builtin)
    verdict = theory.verify_propositions(m, args.tmax)
    rep = verdict.report
    print(f"model {m.name} (depth {args.tmax}):")
    print(f"  L*_obs  = {rep.L_star_obs:.12f}")
    print(f"  L*_hist = {rep.L_star_hist:.12f}")
    print(f"  gap     = {rep.gap:.12f}")
    print(f"  I(a;h|o) = {rep.I_cond_bits:.12f} bits")
    print(f"  decomposition residual = {rep.decomposition_residual:.3e}")
    print(f"verdict: {'PASS' if verdict.holds else 'FAIL'} - {verdict.message}")
    return 0 if verdict.holds else 1


def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = parse_config(args.config)
    else:
        cfg = gradcheck.tiny_config()
    _print_config(cfg)
    n_params = sum(int(np.prod(s.shape))
                   for s in model.param_specs(cfg, envs.descriptor_for(cfg.env)))
    mode = args.mode or ("exact" if n_params <= 20_000 else "spot")
    print(f"{n_params} parameters, mode {mode}")
    report = gradcheck.model_gradcheck(cfg, rel_tol=args.rel_tol, mode=mode)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dssp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="generate expert demonstrations")
    p.add_argument("--env", required=True, choices=envs.ENV_NAMES)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_demos)

    p = sub.add_parser("train", help="train a policy from demonstrations")
    p.add_argument("--config", required=True)
    p.add_argument("--demos", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--env", default=None)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--perturb-history", action="store_true")
    p.add_argument("--csv", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="history-encoding cost benchmark")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lengths", default="64,256,1024")
    p.add_argument("--encoder", default="ssm", choices=["ssm", "attention"])
    p.add_argument("--mode", default="streaming", choices=["streaming", "recompute"])
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--csv", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", default=",".join(evaluation.ABLATION_VARIANTS))
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--csv", default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("verify-theory", help="run the tabular oracle")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--model", help="path to a JSON model spec")
    group.add_argument("--builtin", choices=sorted(theory.BUILTIN_MODELS))
    p.add_argument("--tmax", type=int, default=4)
    p.set_defaults(fn=cmd_verify_theory)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", default=None)
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.add_argument("--mode", choices=["exact", "spot"], default=None)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except DsspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())

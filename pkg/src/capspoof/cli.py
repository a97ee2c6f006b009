"""``capspoof`` command line: gen-pairs, detect, capacity, train, eval, ablate.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from capspoof import plotting
from capspoof.capacity import CapacityReport, binary_kl, capacity_sup, theorem1_check
from capspoof.config import ConfigError, RunConfig, load_run_config
from capspoof.evalkit import (PairDataset, build_pairs, capacity_reward_profile, evaluate_policy, greedy_outputs,
                              parse_variant, run_ablation, run_training, write_grid)
from capspoof.policy import TabularPolicy
from capspoof.reward import surrogate_token_rewards
from capspoof.toylm import read_sequences
from capspoof.watermark import Detector

log = logging.getLogger("capspoof")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
DEFAULT_VARIANTS = "base;weight=uniform;weight=pmax;anchor=off"


def _floats(text: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.replace(",", " ").split()])
    except ValueError as exc:
        raise ConfigError(f"cannot parse vector {text!r}") from exc


def _run_config(args) -> RunConfig:
    return load_run_config(args.config, seed=args.seed, out=args.out)


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.yaml")
    return out


def _dataset(cfg: RunConfig, pairs_dir: str | None) -> PairDataset:
    if pairs_dir:
        return PairDataset.load(pairs_dir, cfg.scheme, cfg.lm, cfg.seed)
    return build_pairs(cfg.lm, cfg.scheme, cfg.train_size, cfg.length, cfg.seed, cfg.eval_size)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_pairs(args) -> int:
    cfg = _run_config(args)
    out = _prepare_out(cfg)
    ds = _dataset(cfg, None)
    ds.save(out / "pairs")
    det = Detector(cfg.scheme, cfg.lm)
    _write_json(out / "pairs_summary.json", {
        "train_pairs": int(ds.train_human.shape[0]), "eval_pairs": int(ds.eval_human.shape[0]),
        "length": ds.length, "train_wm_flagged_rate": float(np.mean([d.flagged for d in det.detect_many(ds.train_wm)])),
    })
    print(out / "pairs")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _run_config(args)
    if args.scheme:
        cfg = load_run_config(args.config, seed=args.seed, out=args.out, **{"scheme.name": args.scheme})
    src = sys.stdin if args.input == "-" else None
    if src is not None:
        rows = [[int(t) for t in line.split()] for line in src if line.strip()]
        seqs = rows
    else:
        seqs = read_sequences(args.input)
    det = Detector(cfg.scheme, cfg.lm)
    lines = [d.to_json() for d in det.detect_many(seqs)]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _prepare_out(cfg)
        (out / "detections.jsonl").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_capacity(args) -> int:
    if args.config:
        _run_config(args)  # validate only
    if args.pi is not None or args.ph is not None:
        if args.pi is None or args.ph is None:
            raise ConfigError("--pi and --ph go together")
        subset = [int(x) for x in _floats(args.subset)] if args.subset else []
        rep = theorem1_check(_floats(args.pi), _floats(args.ph), subset)
        if args.budget is not None:
            lam = capacity_sup(rep.q, args.budget)
            rep = CapacityReport(rep.q, rep.c_t, rep.kl_used, lam, rep.lhs, lam - rep.lhs)
    else:
        # scalar form: off-mode masses p (policy) and q (human-like)
        vals = list(args.scalars) + ([args.q] if args.q is not None else [])
        if not 1 <= len(vals) <= 2:
            raise ConfigError("give one or two masses ([p] q), or --pi/--ph")
        p, q = vals[0], vals[-1]
        if not (0 <= p <= 1 and 0 <= q <= 1):
            raise ConfigError("masses must lie in [0, 1]")
        kl = binary_kl(p, q)
        budget = kl if args.budget is None else args.budget
        lam = capacity_sup(q, budget)
        rep = CapacityReport(q=q, c_t=q, kl_used=budget, lambda_star=lam, lhs=p - q, slack=lam - (p - q))
    print(rep.to_json())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _prepare_out(cfg)
    ds = _dataset(cfg, args.pairs)
    if not args.pairs:
        ds.save(out / "pairs")
    res = run_training(ds, cfg.grpo, cfg.policy_order)
    res.policy.save(out / "checkpoint.json", cfg.to_flat())
    res.log.write_jsonl(out / "training_log.jsonl")
    _write_json(out / "train_summary.json", {"initial": res.initial.summary(), "final": res.final.summary()})
    plotting.plot_training_curves(res.log.epochs, out / "training_curves.png")
    print(json.dumps(res.final.summary(), sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    out = _prepare_out(cfg)
    try:
        policy = TabularPolicy.load(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    if policy.ref != cfg.lm:
        raise ConfigError("checkpoint model differs from configured lm")
    ds = _dataset(cfg, args.pairs)
    det = Detector(cfg.scheme, cfg.lm)
    res = evaluate_policy(policy, ds, det)
    res.write_csv(out / "eval.csv")
    stat_name = "p-value" if cfg.scheme.is_sampling else "z-score"
    groups = {"unwatermarked": det.statistics(ds.eval_human), "watermarked": det.statistics(ds.eval_wm),
              "policy": det.statistics(res.outputs)}
    threshold = None if cfg.scheme.is_sampling else cfg.scheme.z_threshold
    plotting.plot_statistic_hist(groups, out / "statistics.png", threshold, stat_name)

    # capacity/reward profile along greedy rewrites of the training sources
    rewrites = greedy_outputs(policy, ds.train_human)
    c, llr, r = surrogate_token_rewards(cfg.lm, rewrites, ds.train_human, ds.train_wm, cfg.grpo.weighting)
    profile = capacity_reward_profile(c, llr, r) if c.size >= 1000 else []
    if profile:
        with open(out / "capacity_profile.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(profile[0]))
            w.writeheader()
            w.writerows({k: repr(v) if isinstance(v, float) else v for k, v in row.items()} for row in profile)
        plotting.plot_capacity_profile(profile, out / "capacity_profile.png")
    _write_json(out / "eval.json", res.summary())
    print(json.dumps(res.summary(), sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    out = _prepare_out(cfg)
    try:
        variants = [parse_variant(v) for v in args.variants.split(";")]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    seeds = (args.seed,) if args.seed is not None else cfg.seeds
    grid = run_ablation(variants, cfg.grpo, cfg.lm, cfg.scheme, seeds, cfg.train_size, cfg.eval_size,
                        cfg.length, cfg.policy_order)
    write_grid(grid, out / "grid.csv")
    plotting.plot_ablation(grid, out / "ablation.png")
    print(out / "grid.csv")
    return EXIT_OK


def _global_flags(default) -> argparse.ArgumentParser:
    # the same flags are accepted before or after the subcommand; the
    # subcommand copy uses SUPPRESS so it does not clobber earlier values
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=default, help="flat dotted-key YAML config")
    g.add_argument("--seed", type=int, default=default, help="override the run seed")
    g.add_argument("--out", default=default, help="output directory")
    g.add_argument("-v", "--verbose", action="store_true", default=default or False)
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="capspoof", parents=[_global_flags(None)],
                                description="Capacity-aware watermark spoofing on a toy language model.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-pairs", parents=[common], help="sample (human, watermarked) pairs")
    s.set_defaults(func=cmd_gen_pairs)

    s = sub.add_parser("detect", parents=[common], help="run the scheme detector on token sequences")
    s.add_argument("input", help="sequence file, one whitespace-separated sequence per line; '-' for stdin")
    s.add_argument("--scheme", help="scheme name, overrides scheme.name")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("capacity", parents=[common], help="capacity bound for a distribution pair or masses")
    s.add_argument("scalars", nargs="*", type=float, help="off-mode masses: [p] q")
    s.add_argument("--q", type=float, help="off-mode mass of the human-like distribution")
    s.add_argument("--budget", "-C", type=float, help="KL budget C")
    s.add_argument("--pi", help="policy distribution, comma separated")
    s.add_argument("--ph", help="human-like distribution, comma separated")
    s.add_argument("--subset", help="token subset A, comma separated")
    s.set_defaults(func=cmd_capacity)

    s = sub.add_parser("train", parents=[common], help="train the tabular policy")
    s.add_argument("--pairs", help="pair directory from gen-pairs (default: rebuild from config)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on held-out prompts")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pairs", help="pair directory from gen-pairs (default: rebuild from config)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="train and evaluate a grid of variants")
    s.add_argument("--variants", default=DEFAULT_VARIANTS,
                   help="';'-separated variants such as 'base;weight=uniform;anchor=off'")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

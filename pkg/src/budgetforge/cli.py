"""Command-line driver: gen, train, evaluate, sweep."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .allocator import AllocatorConfig, QNetPair, run_policy, train_allocator
from .baselines import StrategySpec, run_baseline
from .config import KEYS, REQUIRED, RunConfig, read_config_file, write_run_record
from .data import FromFile, SimilarityThreshold, build_capability_matrix, load_dataset
from .env import OracleConfig, SyntheticConfig, World, generate_synthetic_world, write_synthetic_world
from .errors import BudgetForgeError, ConfigError, StateError
from .matcher import MatcherTrainConfig, PUMatcher, train_matcher

LEARNED = "pu-adka"
BASELINES = ("random", "cost_greedy", "match_greedy")


# ---------------------------------------------------------------- helpers

def threads() -> int:
    raw = os.environ.get("BUDGETFORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"BUDGETFORGE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def synthetic_config(cfg: RunConfig) -> SyntheticConfig:
    return SyntheticConfig(topics=cfg.topics, questions=cfg.questions, experts=cfg.experts,
                           dimension=cfg.dimension, tau=cfg.tau, seed=cfg.seed,
                           price_ladder=tuple(cfg.price_ladder))


def load_world_data(cfg: RunConfig):
    if not cfg.data:
        return generate_synthetic_world(synthetic_config(cfg))
    d = Path(cfg.data)
    ds = load_dataset(d / "questions.jsonl", d / "experts.jsonl", d / "embeddings.bfem",
                      price_ladder=tuple(cfg.price_ladder))
    cap_file = d / "capability.json"
    policy = FromFile(str(cap_file)) if cap_file.is_file() else SimilarityThreshold(cfg.tau)
    return ds, build_capability_matrix(ds, policy)


def oracle_config(cfg: RunConfig) -> OracleConfig:
    return OracleConfig(bandwidth=cfg.bandwidth or None, mode=cfg.oracle_mode, noise=cfg.noise)


def allocator_config(cfg: RunConfig, train_budgets=()) -> AllocatorConfig:
    ac = AllocatorConfig(
        agents=cfg.agents, cohort_size=cfg.cohort_size, episodes=cfg.episodes, gamma=cfg.gamma,
        decay=cfg.decay, eps_start=cfg.eps_start, eps_end=cfg.eps_end, eps_fraction=cfg.eps_fraction,
        batch_size=cfg.batch_size, sync_period=cfg.sync_period, lr=cfg.lr, hidden=cfg.hidden,
        updates_per_step=cfg.updates_per_step, credit=cfg.credit, seed=cfg.seed,
        train_budgets=tuple(train_budgets),
    )
    ac.validate()
    return ac


def make_world(ds, cap, cfg: RunConfig, budget: float, seed: int) -> World:
    return World(ds, cap, budget, oracle_config(cfg), seed=seed, price_ladder=tuple(cfg.price_ladder))


def check_methods(cfg: RunConfig) -> None:
    bad = [m for m in cfg.methods if m != LEARNED and m not in BASELINES]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {[LEARNED, *BASELINES]}")


def train_models(cfg: RunConfig, ds, cap, out: Path):
    """Train matcher and allocator, persist both plus their reports under ``out``."""
    positive = [b for b in cfg.budget if b > 0]
    if not positive:
        raise ConfigError("training needs a positive budget")
    matcher = PUMatcher(ds.dimension, hidden=cfg.matcher_hidden, seed=cfg.seed)
    _, mrep = train_matcher(matcher, ds, MatcherTrainConfig(
        epochs=cfg.epochs, lr=cfg.matcher_lr, seed=cfg.seed, restarts=cfg.restarts,
        cohort_size=cfg.matcher_cohort))
    mix = positive if len(positive) > 1 else ()
    world = make_world(ds, cap, cfg, max(positive), cfg.seed)
    qnets, arep = train_allocator(world, matcher, allocator_config(cfg, mix))
    out.mkdir(parents=True, exist_ok=True)
    matcher.save(out / "matcher")
    qnets.save(out / "qnets")
    (out / "matcher_report.json").write_text(json.dumps(mrep.to_dict(), sort_keys=True, indent=1) + "\n")
    (out / "allocator_report.json").write_text(arep.to_json() + "\n")
    return matcher, qnets


def load_models(directory: Path):
    for need in ("matcher/matcher.json", "qnets/qnets.json"):
        if not (directory / need).is_file():
            raise StateError(f"no trained model at {directory / need}; run `budgetforge train` first")
    return PUMatcher.load(directory / "matcher"), QNetPair.load(directory / "qnets")


def run_cell(ds, cap, cfg: RunConfig, method: str, budget: float, seed: int, matcher=None, qnets=None):
    world = make_world(ds, cap, cfg, budget, seed)
    if method == LEARNED:
        return run_policy(world, matcher, qnets, seed, allocator_config(cfg))
    return run_baseline(world, StrategySpec("rand", method, seed), batch_size=cfg.agents,
                        cohort_size=cfg.cohort_size)


def summarize(scores) -> dict:
    a = np.asarray(scores, dtype=float)
    std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
    return {"mean": float(a.mean()) if len(a) else float("nan"), "std": std, "n": int(len(a))}


def aligned_table(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands

def cmd_gen(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    paths = write_synthetic_world(synthetic_config(cfg), out)
    write_run_record(cfg, "gen", out)
    for role, p in sorted(paths.items()):
        print(f"{role:<11} {p}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    ds, cap = load_world_data(cfg)
    write_run_record(cfg, "train", out)
    train_models(cfg, ds, cap, out)
    print(f"checkpoints written to {out}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    check_methods(cfg)
    if len(cfg.budget) != 1:
        raise ConfigError("evaluate takes a single budget; use sweep for several")
    budget = cfg.budget[0]
    out = Path(cfg.out)
    matcher = qnets = None
    if LEARNED in cfg.methods:
        matcher, qnets = load_models(Path(cfg.checkpoint or cfg.out))
    ds, cap = load_world_data(cfg)
    write_run_record(cfg, "evaluate", out)
    table = {}
    for method in cfg.methods:
        scores = []
        for seed in cfg.seeds:
            rep = run_cell(ds, cap, cfg, method, budget, seed, matcher, qnets)
            (out / "reports" / method).mkdir(parents=True, exist_ok=True)
            (out / "reports" / method / f"seed{seed}.json").write_text(rep.to_json() + "\n")
            scores.append(rep.final_score)
        table[method] = {**summarize(scores), "scores": scores}
    dump_json(out / "evaluate.json", {"budget": budget, "seeds": list(cfg.seeds), "methods": table})
    text = aligned_table(["method", "mean", "std", "n"],
                         [[m, f"{r['mean']:.4f}", f"{r['std']:.4f}", r["n"]] for m, r in table.items()])
    (out / "evaluate.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    check_methods(cfg)
    out = Path(cfg.out)
    ds, cap = load_world_data(cfg)
    write_run_record(cfg, "sweep", out)
    matcher = qnets = None
    if LEARNED in cfg.methods:
        if cfg.checkpoint:
            matcher, qnets = load_models(Path(cfg.checkpoint))
        else:
            matcher, qnets = train_models(cfg, ds, cap, out / "model")
    grid = [(b, m, s) for b in cfg.budget for m in cfg.methods for s in cfg.seeds]

    def work(cell):
        b, m, s = cell
        try:
            return run_cell(ds, cap, cfg, m, b, s, matcher, qnets), None
        except BudgetForgeError as exc:
            return None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        results = list(pool.map(work, grid))

    cells = []
    for (b, m, s), (rep, err) in zip(grid, results):
        if rep is not None:
            (out / "reports" / f"b{b:g}" / m).mkdir(parents=True, exist_ok=True)
            (out / "reports" / f"b{b:g}" / m / f"seed{s}.json").write_text(rep.to_json() + "\n")
            cells.append({"budget": b, "method": m, "seed": s, "score": rep.final_score, "status": "ok"})
        else:
            cells.append({"budget": b, "method": m, "seed": s, "score": None, "status": "failed", "error": err})
    summary = {}
    for m in cfg.methods:
        summary[m] = {f"{b:g}": summarize([c["score"] for c in cells
                                            if c["method"] == m and c["budget"] == b and c["status"] == "ok"])
                      for b in cfg.budget}
    monotone = {m: bool(all(np.diff([summary[m][f"{b:g}"]["mean"] for b in cfg.budget]) >= -1e-12))
                for m in cfg.methods}
    dump_json(out / "sweep.json", {"budgets": list(cfg.budget), "seeds": list(cfg.seeds),
                                   "cells": cells, "summary": summary, "monotone": monotone})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["budget", "method", "seed", "score", "status"])
    for c in cells:
        w.writerow([f"{c['budget']:g}", c["method"], c["seed"], "" if c["score"] is None else repr(c["score"]),
                    c["status"]])
    (out / "sweep.csv").write_text(buf.getvalue())
    text = aligned_table(["method", *[f"${b:g}" for b in cfg.budget]],
                         [[m, *[f"{summary[m][f'{b:g}']['mean']:.4f}" for b in cfg.budget]] for m in cfg.methods])
    (out / "sweep.txt").write_text(text)
    sys.stdout.write(text)
    failed = sum(c["status"] == "failed" for c in cells)
    if failed:
        print(f"{failed} cell(s) failed; see sweep.json", file=sys.stderr)
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep}
DESCRIPTIONS = {
    "gen": "write a synthetic dataset",
    "train": "train the matcher and the allocator",
    "evaluate": "compare methods at one budget",
    "sweep": "compare methods across budgets",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="budgetforge",
                                     description="Budgeted expert annotation: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name])
        p.add_argument("--config", help="INI file; flags override its keys")
        required = REQUIRED[name]
        for key, spec in KEYS.items():
            flags = list(dict.fromkeys(["--" + key.replace("_", "-"), "--" + key]))
            tag = " [required]" if key in required else ""
            default = "" if spec.default in (None, "") else f" (default: {spec.default})"
            p.add_argument(*flags, dest=key, default=None, metavar=spec.kind.upper(),
                           help=f"{spec.help}{default}{tag}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in KEYS}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = RunConfig.resolve(args.command, file_values, overrides)
        return COMMANDS[args.command](cfg)
    except BudgetForgeError as exc:
        print(f"budgetforge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

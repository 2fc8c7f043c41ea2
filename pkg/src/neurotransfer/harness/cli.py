"""Command line: run trials, summarize a run directory, dump truth tables, replay arena policies."""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .. import arena as arena_mod
from .. import gates
from .config import ARENA_TASKS, ConfigError, ExperimentConfig, apply_overrides, load_config, to_text
from .summary import EmptyLogSetError, summarize
from .trial import TrialLog, decode_policy, run_trial


def _trial_json(cfg: ExperimentConfig, seed: int) -> str:
    return run_trial(cfg, seed).to_json()


def run_dir(cfg: ExperimentConfig, out: str | Path) -> Path:
    cfg = cfg.resolve()
    cur = "" if cfg.curriculum else "-direct"
    return Path(out) / f"{cfg.method}-{cfg.task}{cur}-{cfg.hash()[:8]}"


def cmd_run(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    else:
        if not args.method or not args.task:
            raise ConfigError("--method and --task are required unless --config is given")
        cfg = ExperimentConfig(args.method, args.task)
    changes = {k: v for k, v in (("method", args.method), ("task", args.task), ("profile", args.profile),
                                 ("seeds", args.seeds), ("budget", args.budget), ("out_dir", args.out),
                                 ("arena", args.arena), ("n_bits", args.n_bits)) if v is not None}
    if args.no_curriculum:
        changes["curriculum"] = False
    cfg = apply_overrides(replace(cfg, **changes), args.set or [])
    resolved = cfg.resolve()
    target = run_dir(resolved, resolved.out_dir)
    target.mkdir(parents=True, exist_ok=True)
    (target / "config.txt").write_text(to_text(resolved))
    (target / "overrides.json").write_text(json.dumps(sorted(args.set or []), indent=1) + "\n")
    seeds = list(range(resolved.seeds))
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            texts = list(pool.map(_trial_json, [resolved] * len(seeds), seeds))
    else:
        texts = [_trial_json(resolved, s) for s in seeds]
    for seed, text in zip(seeds, texts):
        (target / f"trial_{seed}.json").write_text(text)
        s = json.loads(text)["summary"]
        print(f"seed {seed}: solved={s['solved']} level={s['final_level']} best={s['best_fitness']} "
              f"evaluations={s['evaluations']}")
    print(f"logs written to {target}")
    return 0


def cmd_summarize(args) -> int:
    manifest = summarize(args.dir)
    print(f"summarized {len(manifest['trials'])} trials in {len(manifest['conditions'])} conditions")
    return 0


def cmd_dump(args) -> int:
    task = gates.parity_task(args.n_bits) if args.task == "parity" else gates.alu_task()
    try:
        task.check_level(args.level)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    sys.stdout.write(gates.truth_table_csv(task, args.level))
    return 0


def cmd_replay(args) -> int:
    log = TrialLog.from_json(Path(args.log).read_text())
    task = log.config["task"]
    if task not in ARENA_TASKS:
        raise ConfigError(f"replay needs an arena task; log is for {task!r}")
    if not log.best_policy:
        raise ConfigError("log holds no policy to replay")
    arena = arena_mod.parse_arena(Path(args.arena).read_text())
    env = arena_mod.ArenaEnv(arena, task, 1, goal_conditioned=log.config["method"] == "gcppo")
    _, _, traj = arena_mod.rollout(env, decode_policy(log.best_policy), record=True)
    text = arena_mod.trajectory_csv(traj)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neurotransfer", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run independent trials of one condition")
    r.add_argument("--method")
    r.add_argument("--task")
    r.add_argument("--profile", choices=("desk", "paper"))
    r.add_argument("--seeds", type=int)
    r.add_argument("--no-curriculum", action="store_true")
    r.add_argument("--budget", type=int)
    r.add_argument("--out")
    r.add_argument("--arena", help="shipped arena name or path to an arena file")
    r.add_argument("--n-bits", type=int, help="parity width")
    r.add_argument("--config", help="flat key = value config file")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    r.add_argument("--workers", type=int, default=1, help="parallel trial processes")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("summarize", help="aggregate trial logs in a directory")
    s.add_argument("dir")
    s.set_defaults(func=cmd_summarize)

    d = sub.add_parser("dump-truth-table", help="print a level's oracle truth table as CSV")
    d.add_argument("--task", required=True, choices=("parity", "alu"))
    d.add_argument("--level", required=True, type=int)
    d.add_argument("--n-bits", type=int, default=6)
    d.set_defaults(func=cmd_dump)

    rp = sub.add_parser("replay", help="roll out a logged arena policy and print its trajectory CSV")
    rp.add_argument("--log", required=True)
    rp.add_argument("--arena", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, EmptyLogSetError, arena_mod.ArenaParseError, arena_mod.ArenaValidationError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

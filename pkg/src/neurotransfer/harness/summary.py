"""Aggregate trial logs into summary tables, pairwise tests, curves and a manifest."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .stats import kruskal_wallis, mann_whitney_u, significance_stars
from .trial import TrialLog

SUMMARY_FILE = "summary.csv"
PAIRWISE_FILE = "pairwise.csv"
CURVES_FILE = "curves.csv"
MANIFEST_FILE = "manifest.json"


class EmptyLogSetError(ValueError):
    pass


@dataclass(frozen=True)
class Condition:
    method: str
    task: str
    curriculum: bool
    config_hash: str

    @property
    def label(self) -> str:
        cur = "" if self.curriculum else "-direct"
        return f"{self.method}-{self.task}{cur}-{self.config_hash[:8]}"


def condition_of(log: TrialLog) -> Condition:
    c = log.config
    return Condition(c["method"], c["task"], bool(c["curriculum"]), log.config_hash)


def load_logs(directory: str | Path) -> list[tuple[Path, TrialLog]]:
    root = Path(directory)
    paths = sorted(root.rglob("trial_*.json"))
    return [(p, TrialLog.from_json(p.read_text())) for p in paths]


def _final(log: TrialLog, key: str) -> float:
    v = log.summary.get(key)
    return float("nan") if v is None else float(v)


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def _mean_std(vals) -> tuple[float, float]:
    v = np.asarray([x for x in vals if np.isfinite(x)])
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def build_tables(logs: list[TrialLog]) -> dict[str, str]:
    """Render the summary, pairwise and curve tables as CSV text."""
    if not logs:
        raise EmptyLogSetError("no trial logs to summarize")
    groups: dict[Condition, list[TrialLog]] = {}
    for log in logs:
        groups.setdefault(condition_of(log), []).append(log)
    conds = sorted(groups, key=lambda c: c.label)
    for c in conds:
        groups[c].sort(key=lambda log: log.seed)

    summary = [["condition", "method", "task", "curriculum", "config_hash", "n_trials", "success_mean", "success_std",
                "fitness_mean", "fitness_std", "solved", "final_level_mean"]]
    for c in conds:
        g = groups[c]
        sm, ss = _mean_std([_final(log, "final_success") for log in g])
        fm, fs = _mean_std([_final(log, "best_fitness") for log in g])
        lm, _ = _mean_std([_final(log, "final_level") for log in g])
        summary.append([c.label, c.method, c.task, int(c.curriculum), c.config_hash, len(g), _fmt(sm), _fmt(ss),
                        _fmt(fm), _fmt(fs), sum(bool(log.summary.get("solved")) for log in g), _fmt(lm)])

    pairwise = [["task", "metric", "condition_a", "condition_b", "u", "p", "stars"]]
    for task in sorted({c.task for c in conds}):
        tconds = [c for c in conds if c.task == task]
        for metric in ("best_fitness", "final_success"):
            for a, b in itertools.combinations(tconds, 2):
                xa = [v for v in (_final(log, metric) for log in groups[a]) if np.isfinite(v)]
                xb = [v for v in (_final(log, metric) for log in groups[b]) if np.isfinite(v)]
                if not xa or not xb:
                    continue
                res = mann_whitney_u(xa, xb)
                pairwise.append([task, metric, a.label, b.label, repr(res.u), repr(res.p), significance_stars(res.p)])

    curves = [["condition", "seed", "generation", "evaluations", "env_steps", "best_fitness", "mean_fitness",
               "success", "level"]]
    for c in conds:
        for log in groups[c]:
            for r in log.rows:
                curves.append([c.label, log.seed] + ["" if r.get(k) is None else r[k] for k in
                                                     ("generation", "evaluations", "env_steps", "best_fitness",
                                                      "mean_fitness", "success", "level")])
    return {SUMMARY_FILE: _csv(summary), PAIRWISE_FILE: _csv(pairwise), CURVES_FILE: _csv(curves)}


def _omnibus(logs: list[TrialLog]) -> dict:
    """Kruskal-Wallis over every condition of each task with at least two conditions."""
    out = {}
    by_task: dict[str, dict[Condition, list[float]]] = {}
    for log in logs:
        v = _final(log, "best_fitness")
        if np.isfinite(v):
            by_task.setdefault(log.config["task"], {}).setdefault(condition_of(log), []).append(v)
    for task, groups in sorted(by_task.items()):
        if len(groups) >= 2:
            h, p = kruskal_wallis([groups[c] for c in sorted(groups, key=lambda c: c.label)])
            out[task] = {"h": h, "p": p, "stars": significance_stars(p)}
    return out


def summarize(directory: str | Path) -> dict:
    """Write summary tables and a manifest into ``directory``; return the manifest.

    Only ``trial_*.json`` files are read, so summarizing a directory twice
    gives byte-identical outputs.
    """
    root = Path(directory)
    loaded = load_logs(root)
    if not loaded:
        raise EmptyLogSetError(f"no trial_*.json logs under {root}")
    logs = [log for _, log in loaded]
    tables = build_tables(logs)
    for name, text in tables.items():
        (root / name).write_text(text)
    manifest = {
        "trials": [{"path": p.relative_to(root).as_posix(), "seed": log.seed, "config_hash": log.config_hash,
                    "condition": condition_of(log).label,
                    "sha256": hashlib.sha256(p.read_bytes()).hexdigest()} for p, log in loaded],
        "outputs": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(tables.items())},
        "conditions": sorted({condition_of(log).label for log in logs}),
        "kruskal_wallis": _omnibus(logs),
    }
    (root / MANIFEST_FILE).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest

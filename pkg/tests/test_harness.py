import json
from dataclasses import replace

import numpy as np
import pytest

from neurotransfer import arena as A
from neurotransfer import gates
from neurotransfer.harness import cli
from neurotransfer.harness.config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    from_text,
    to_text,
)
from neurotransfer.harness.summary import (
    MANIFEST_FILE,
    PAIRWISE_FILE,
    SUMMARY_FILE,
    EmptyLogSetError,
    build_tables,
    summarize,
)
from neurotransfer.harness.trial import (
    CurriculumState,
    TrialLog,
    advance_level,
    decode_policy,
    gates_fitness,
    run_trial,
    visited_cells,
)


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------


def test_curriculum_examples():
    cur = CurriculumState.start(5)
    assert cur.level == 1
    assert advance_level(cur, 0.999) == cur
    up = advance_level(cur, 1.0, generation=7)
    assert up.level == 2 and not up.solved and up.first_solve == ((1, 7),)
    final = CurriculumState(5, 5)
    done = advance_level(final, 1.0, 3)
    assert done.solved and done.level == 5
    assert advance_level(done, 1.0, 4) == done
    with pytest.raises(ValueError):
        advance_level(cur, 1.5)


def test_disabled_curriculum_pins_final_level():
    log = run_trial(ExperimentConfig("cmaes", "parity", curriculum=False, budget=600), 0)
    assert {r["level"] for r in log.rows} == {5}
    assert CurriculumState.start(5, enabled=False).level == 5


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------


def test_oracle_solves_one_level_per_generation():
    log = run_trial(ExperimentConfig("oracle", "parity"), 0)
    assert [r["level"] for r in log.rows] == [1, 2, 3, 4, 5]
    assert all(r["success"] == 1.0 for r in log.rows)
    assert log.summary["solved"] and log.summary["first_solve"] == [[k, k - 1] for k in range(1, 6)]
    alu = run_trial(ExperimentConfig("oracle", "alu"), 0)
    assert alu.summary["solved"] and len(alu.rows) == 8


@pytest.mark.parametrize("method", ["neat", "cmaes", "hyperneat", "ppo"])
def test_gates_trial_budget_and_monotone_level(method):
    cfg = ExperimentConfig(method, "parity", n_bits=3, budget=4000, ppo_batch=256)
    log = run_trial(cfg, 1)
    evals = [r["evaluations"] for r in log.rows]
    levels = [r["level"] for r in log.rows]
    assert evals == sorted(evals) and levels == sorted(levels)
    assert log.summary["evaluations"] == evals[-1] <= 4000
    # every generation spends the same number of episodes: population size, or envs x unroll
    steps = np.diff([0] + evals)
    assert len(set(steps.tolist())) == 1
    if method == "ppo":
        assert steps[0] == 256
    elif method in ("neat", "hyperneat"):
        assert steps[0] == 150


def test_trial_logs_are_byte_identical_across_reruns():
    for cfg in (ExperimentConfig("neat", "parity", n_bits=3, budget=1500),
                ExperimentConfig("ppo", "alu", budget=2048, ppo_batch=512)):
        assert run_trial(cfg, 3).to_json() == run_trial(cfg, 3).to_json()
    a = run_trial(ExperimentConfig("cmaes", "parity", n_bits=3, budget=500), 3).to_json()
    b = run_trial(ExperimentConfig("cmaes", "parity", n_bits=3, budget=500), 4).to_json()
    assert a != b


def test_config_errors():
    with pytest.raises(ConfigError, match="goals"):
        run_trial(ExperimentConfig("gcppo", "deceptive"), 0)
    with pytest.raises(ConfigError, match="budget"):
        run_trial(ExperimentConfig("neat", "parity", budget=0), 0)
    with pytest.raises(ConfigError):
        run_trial(ExperimentConfig("mapelites", "alu"), 0)
    with pytest.raises(ConfigError):
        run_trial(ExperimentConfig("oracle", "stones"), 0)
    with pytest.raises(ConfigError):
        ExperimentConfig("sgd", "parity").validate()


def test_config_text_round_trip_and_overrides():
    cfg = ExperimentConfig("cmaes", "alu", budget=123, cma_sigma0=0.25).resolve()
    assert from_text(to_text(cfg)) == cfg
    over = apply_overrides(cfg, ["cma_hidden=7", "curriculum=false", "ppo_batch=auto"])
    assert over.cma_hidden == 7 and over.curriculum is False and over.ppo_batch is None
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["cma_hidden=seven"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["colour=red"])
    assert cfg.hash() == replace(cfg, out_dir="elsewhere", seeds=3).hash()
    assert cfg.hash() != replace(cfg, cma_hidden=7).hash()


def test_desk_and_paper_profiles():
    desk = ExperimentConfig("neat", "parity").resolve()
    paper = ExperimentConfig("neat", "parity", profile="paper").resolve()
    assert (desk.pop_size, desk.species_target) == (150, 10)
    assert (paper.pop_size, paper.species_target) == (5000, 50)
    assert desk.budget == 300_000 and ExperimentConfig("ppo", "stones").resolve().budget == 1_000_000
    assert paper.ppo_batch == 20498


def test_gates_fitness_orders_by_correct_bits():
    task = gates.parity_task(2)
    _, target = gates.cached_truth_table(task, 1)
    perfect = target[None].astype(float)
    half = np.array([[[0.0], [0.0], [0.0], [0.0]]])
    fit, succ = gates_fitness(task, 1, np.concatenate([perfect, half]))
    assert succ.tolist() == [1.0, 0.5]
    assert fit[0] == pytest.approx(4.2) and 2.0 < fit[1] < 2.2


def test_arena_trial_and_policy_replay(tmp_path):
    cfg = ExperimentConfig("cmaes", "deceptive", budget=40_000, cma_hidden=4)
    log = run_trial(cfg, 0)
    assert log.summary["env_steps"] <= 40_000
    assert log.summary["evaluations"] == sum(np.diff([0] + [r["evaluations"] for r in log.rows]))
    policy = decode_policy(log.best_policy)
    env = A.ArenaEnv(A.shipped_arena("easy_maze"), A.DECEPTIVE)
    ret, _, _ = A.rollout(env, policy)
    assert ret[0] == pytest.approx(log.summary["best_fitness"], abs=1e-9)
    restored = TrialLog.from_json(log.to_json())
    assert restored.to_json() == log.to_json()


def test_ppo_arena_evaluations_count_episodes():
    log = run_trial(ExperimentConfig("ppo", "locomotion", budget=20_000, ppo_batch=1000), 0)
    assert log.summary["env_steps"] == 20_000 and log.summary["evaluations"] == 20
    assert 0 < log.summary["visited_cells"] <= 2500


def test_visited_cells():
    arena = A.Arena((0, 0, 1, 1), (0.5, 0.5, 0), (0.9, 0.9))
    traj = [(np.array([[0.01, 0.01]]), None, None), (np.array([[0.015, 0.012]]), None, None),
            (np.array([[0.99, 0.5]]), None, None)]
    assert visited_cells(traj, arena) == {(0, 0), (49, 25)}


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


def fake_log(method, seed, fitness, success=1.0):
    cfg = ExperimentConfig(method, "parity").resolve()
    log = TrialLog(cfg.as_dict(), cfg.hash(), seed)
    log.append(generation=0, evaluations=10, env_steps=10, best_fitness=fitness, mean_fitness=fitness,
               success=success, level=1)
    log.summary = {"final_level": 1, "solved": success == 1.0, "final_success": success, "best_fitness": fitness}
    return log


def read_csv(text):
    lines = [line.split(",") for line in text.strip().splitlines()]
    return [dict(zip(lines[0], row)) for row in lines[1:]]


def test_identical_logs_have_zero_spread():
    rows = read_csv(build_tables([fake_log("neat", s, 3.5) for s in range(10)])[SUMMARY_FILE])
    assert len(rows) == 1
    assert float(rows[0]["fitness_std"]) == 0.0 and float(rows[0]["success_std"]) == 0.0
    assert rows[0]["n_trials"] == "10" and rows[0]["solved"] == "10"


def test_disjoint_conditions_are_starred():
    logs = [fake_log("neat", s, 10.0 + s) for s in range(5)] + [fake_log("cmaes", s, float(s)) for s in range(5)]
    rows = read_csv(build_tables(logs)[PAIRWISE_FILE])
    fit = [r for r in rows if r["metric"] == "best_fitness"][0]
    assert float(fit["p"]) == pytest.approx(2 / 252) and fit["stars"] == "*"
    tie = [r for r in rows if r["metric"] == "final_success"][0]
    assert tie["stars"] == ""


def test_summarize_is_idempotent(tmp_path):
    for s in range(3):
        (tmp_path / f"trial_{s}.json").write_text(fake_log("neat", s, float(s)).to_json())
        (tmp_path / "other").mkdir(exist_ok=True)
        (tmp_path / "other" / f"trial_{s}.json").write_text(fake_log("cmaes", s, 5.0 + s).to_json())
    first = summarize(tmp_path)
    snapshot = {p.name: p.read_bytes() for p in tmp_path.iterdir() if p.is_file()}
    second = summarize(tmp_path)
    assert first == second
    assert {p.name: p.read_bytes() for p in tmp_path.iterdir() if p.is_file()} == snapshot
    assert len(first["trials"]) == 6 and "parity" in first["kruskal_wallis"]
    with pytest.raises(EmptyLogSetError):
        summarize(tmp_path / "other" / "nothing")
    with pytest.raises(EmptyLogSetError):
        build_tables([])


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def test_cli_run_summarize_and_errors(tmp_path, capsys):
    out = tmp_path / "runs"
    assert cli.main(["run", "--method", "oracle", "--task", "parity", "--seeds", "2", "--out", str(out)]) == 0
    (run,) = list(out.iterdir())
    assert run.name.startswith("oracle-parity-")
    assert sorted(p.name for p in run.iterdir()) == ["config.txt", "overrides.json", "trial_0.json", "trial_1.json"]
    assert from_text((run / "config.txt").read_text()).method == "oracle"
    assert cli.main(["summarize", str(out)]) == 0
    assert (out / MANIFEST_FILE).exists()
    capsys.readouterr()

    assert cli.main(["run", "--method", "gcppo", "--task", "parity", "--out", str(out)]) == 2
    assert "goals" in capsys.readouterr().err
    assert cli.main(["run", "--method", "neat", "--task", "parity", "--budget", "0", "--out", str(out)]) == 2
    assert cli.main(["run", "--method", "neat", "--task", "parity", "--set", "bogus=1", "--out", str(out)]) == 2
    assert cli.main(["summarize", str(tmp_path / "empty")]) == 2
    assert cli.main(["dump-truth-table", "--task", "parity", "--level", "9"]) == 2


def test_cli_overrides_recorded(tmp_path):
    out = tmp_path / "runs"
    assert cli.main(["run", "--method", "cmaes", "--task", "parity", "--n-bits", "3", "--seeds", "1",
                     "--budget", "300", "--set", "cma_hidden=5", "--no-curriculum", "--out", str(out)]) == 0
    (run,) = list(out.iterdir())
    assert "-direct-" in run.name
    assert json.loads((run / "overrides.json").read_text()) == ["cma_hidden=5"]
    cfg = from_text((run / "config.txt").read_text())
    assert cfg.cma_hidden == 5 and cfg.curriculum is False and cfg.budget == 300


def test_cli_dump_truth_table(capsys):
    assert cli.main(["dump-truth-table", "--task", "alu", "--level", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 33 and lines[0].startswith("in0,")
    assert cli.main(["dump-truth-table", "--task", "parity", "--level", "2", "--n-bits", "4"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 9


def test_cli_replay(tmp_path, capsys):
    out = tmp_path / "runs"
    assert cli.main(["run", "--method", "cmaes", "--task", "deceptive", "--seeds", "1", "--budget", "30000",
                     "--set", "cma_hidden=3", "--out", str(out)]) == 0
    (run,) = list(out.iterdir())
    trace = tmp_path / "trace.csv"
    arena_file = A.shipped_arena_path("easy_maze")
    assert cli.main(["replay", "--log", str(run / "trial_0.json"), "--arena", arena_file, "--out", str(trace)]) == 0
    lines = trace.read_text().splitlines()
    assert lines[0] == "t,x,y,reward,crossed" and len(lines) >= 2
    assert cli.main(["replay", "--log", str(tmp_path / "missing.json"), "--arena", arena_file]) == 2
    oracle_dir = tmp_path / "o"
    cli.main(["run", "--method", "oracle", "--task", "parity", "--seeds", "1", "--out", str(oracle_dir)])
    (orun,) = list(oracle_dir.iterdir())
    capsys.readouterr()
    assert cli.main(["replay", "--log", str(orun / "trial_0.json"), "--arena", arena_file]) == 2
    assert "arena task" in capsys.readouterr().err

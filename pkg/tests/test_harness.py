import csv
import io
import json

import numpy as np
import pytest

from csac.cli import main
from csac.coop import EpisodeLog
from csac.harness import (ConfigError, Experiment, SweepSpec, TrainConfig, evaluate_checkpoint,
                          export_trajectories, metrics_header, run_sweep, success_rate, train,
                          trailing_mean)

TINY = dict(epochs=3, eval_steps=120, explore_steps=150, train_loops=4, hidden=[8, 8],
            batch_size=32, warmup=32, max_episode_length=50, checkpoint_every=1)


def tiny(**kw) -> TrainConfig:
    return TrainConfig.for_scale("desk", **{**TINY, **kw})


def test_desk_preset_values():
    cfg = TrainConfig.for_scale("desk")
    assert (cfg.epochs, cfg.eval_steps, cfg.explore_steps) == (150, 1000, 1000)
    assert cfg.train_loops == 200 and cfg.maze_scale == 0.5
    paper = TrainConfig.for_scale("paper")
    assert (paper.epochs, paper.eval_steps, paper.train_loops, paper.batch_size) == \
        (3000, 5000, 1000, 256)
    assert paper.gamma == 0.95 and paper.tau == 0.005 and paper.learning_rate == 3e-4


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny(method="nope")
    with pytest.raises(ConfigError):
        tiny(rooms=7)
    with pytest.raises(ConfigError):
        tiny(coop_ratios=1.5)
    with pytest.raises(ConfigError):
        tiny(not_a_key=1)


def test_config_json_round_trip(tmp_path):
    cfg = tiny(rooms=3, coop_ratios=[0.1, 1.0])
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert TrainConfig.load(tmp_path / "c.json") == cfg


def test_epoch_accounting():
    cfg = tiny(epochs=2)
    exp = Experiment(cfg)
    exp.run()
    assert exp.env_steps == 2 * (120 + 150)
    assert exp.buffer_writes == {"eval": 0, "explore": 300}
    assert sum(len(b.buffer) for b in exp.trainer.bundles) == 300
    assert [s.epoch for s in exp.history] == [1, 2]


def test_success_rate_counts_completed_episodes():
    logs = [EpisodeLog(success=i < 8, completed=True) for i in range(10)]
    logs.append(EpisodeLog(success=False, completed=False))
    assert success_rate(logs) == (0.8, 10)
    assert success_rate([]) == (0.0, 0)


def test_metrics_csv_header_and_rows(tmp_path):
    exp = train(tiny(rooms=3), tmp_path / "run")
    rows = list(csv.reader(io.StringIO((tmp_path / "run" / "metrics.csv").read_text())))
    assert rows[0] == metrics_header(3, 3)
    assert rows[0][:5] == ["epoch", "env_steps", "eval_success_rate", "return_sub1",
                           "return_sub2"]
    assert rows[0][-1] == "seconds"
    assert len(rows) == 1 + exp.epoch
    assert (tmp_path / "run" / "checkpoint.npz").exists()
    assert json.loads((tmp_path / "run" / "manifest.json").read_text())["seed"] == 0


def test_single_agent_metrics_have_one_agent(tmp_path):
    exp = train(tiny(method="single"), tmp_path / "s")
    header = (tmp_path / "s" / "metrics.csv").read_text().splitlines()[0].split(",")
    assert header == metrics_header(2, 1)
    assert len(exp.trainer.bundles) == 1


def test_same_seed_gives_identical_metrics(tmp_path):
    train(tiny(seed=4), tmp_path / "a")
    train(tiny(seed=4), tmp_path / "b")
    train(tiny(seed=5), tmp_path / "c")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    full = train(tiny(epochs=4), tmp_path / "full")
    train(tiny(epochs=2), tmp_path / "part")
    resumed = Experiment.from_checkpoint(tmp_path / "part" / "checkpoint.npz",
                                         tmp_path / "part")
    resumed.config = tiny(epochs=4)
    resumed.run()
    assert resumed.metrics_csv() == full.metrics_csv()
    for a, b in zip(resumed.trainer.bundles, full.trainer.bundles):
        sa, sb = a.agent.state_dict(), b.agent.state_dict()
        for k in sa:
            assert np.asarray(sa[k]).tobytes() == np.asarray(sb[k]).tobytes()


def test_resume_rejects_mismatched_config(tmp_path):
    train(tiny(epochs=1), tmp_path / "r")
    with pytest.raises(ConfigError):
        train(tiny(epochs=2, seed=9), tmp_path / "r", resume=True)


def test_sweep_single_point(tmp_path):
    spec = SweepSpec([[0.1]], seeds=[0], window=2, shared=True)
    rows = run_sweep(spec, tiny(epochs=2), tmp_path / "sw")
    assert len(rows) == 1 and rows[0]["ratios"] == [0.1] and rows[0]["failed"] == 0
    table = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert table[0] == "eta_1,mean_success,seeds_ok,seeds_failed" and len(table) == 2


def test_sweep_grid_size():
    spec = SweepSpec([[0.0, 0.5, 1.0], [0.1, 1.0]], seeds=[0, 1, 2])
    assert spec.grid_size(2) == 18
    with pytest.raises(ConfigError):
        spec.points(3)


def test_trailing_mean():
    assert trailing_mean([0, 0, 1, 1], 2) == 1.0
    assert trailing_mean([0.5], 10) == 0.5


def test_export_trajectories(tmp_path):
    train(tiny(rooms=2), tmp_path / "e")
    ckpt = tmp_path / "e" / "checkpoint.npz"
    text = export_trajectories(ckpt, count=20, critic=2, seed=3)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert list(rows[0]) == ["episode", "t", "x", "y", "theta", "v", "omega", "subtask",
                             "r1", "r2", "q2"]
    assert len({r["episode"] for r in rows}) == 20
    assert all(np.isfinite(float(r["q2"])) for r in rows)
    assert export_trajectories(ckpt, count=20, critic=2, seed=3) == text
    with pytest.raises(ConfigError):
        export_trajectories(ckpt, count=1, critic=5)


def test_cli_train_eval_and_validate(tmp_path, capsys):
    out = tmp_path / "cli"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({k: v for k, v in TINY.items()}))
    code = main(["train", "--config", str(cfg), "--method", "csac", "--rooms", "2",
                 "--coop-ratio", "0.1", "--scale", "desk", "--epochs", "1",
                 "--out-dir", str(out)])
    assert code == 0
    assert (out / "metrics.csv").exists() and (out / "checkpoint.npz").exists()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.npz"), "--episodes", "5"]) == 0
    assert "success rate" in capsys.readouterr().out
    assert main(["validate-maze", "--rooms", "4"]) == 0
    assert "valid" in capsys.readouterr().out


def test_cli_errors_exit_with_config_code(tmp_path):
    assert main(["train", "--bogus"]) == 1
    assert main(["train", "--set", "epochs=oops"]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.npz")]) == 1


def test_untrained_policy_rarely_succeeds(tmp_path):
    train(tiny(epochs=0, checkpoint_every=1), tmp_path / "u")
    rate = evaluate_checkpoint(tmp_path / "u" / "checkpoint.npz", episodes=40, seed=1)
    assert rate <= 0.05


def test_resume_may_extend_epoch_budget(tmp_path):
    train(tiny(epochs=1), tmp_path / "x")
    exp = train(tiny(epochs=2), tmp_path / "x", resume=True)
    assert exp.epoch == 2 and exp.config.epochs == 2

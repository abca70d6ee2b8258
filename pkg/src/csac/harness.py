"""Epoch-based experiment driver: evaluate, explore, train; metrics, checkpoints, sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .coop import CSAC, METHODS, SINGLE, CooperativeTrainer
from .env import EVALUATION, EXPLORATION, EnvConfig, MazeEnv
from .maze import MazeSpec, builtin_maze
from .sac import SacAgent, SacConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "csac-checkpoint/1"
SCALES = ("desk", "paper")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class TrainConfig:
    method: str = CSAC
    rooms: int = 2
    layout: str | None = None  # layout file; overrides ``rooms``
    coop_ratios: float | list[float] = 0.1
    gamma: float = 0.95
    buffer_capacity: int = 1_000_000
    batch_size: int = 256
    learning_rate: float = 3e-4
    max_episode_length: int = 1000
    tau: float = 0.005
    eval_steps: int = 5000
    explore_steps: int = 5000
    train_loops: int = 1000
    epochs: int = 3000
    hidden: list[int] = field(default_factory=lambda: [256, 256])
    activation: str = "relu"
    alpha_init: float = 0.01
    auto_alpha: bool = True
    warmup: int | None = None
    normalize_policy_critic: bool = True
    literal_target: bool = False
    maze_scale: float = 1.0
    dt: float = 0.1
    v_max: float = 1.0
    omega_max: float = math.pi
    beams: int = 16
    max_range: float = 10.0
    exit_bonus: float = 10.0
    living_cost: float = 0.01
    checkpoint_every: int = 1
    snapshot_every: int = 0
    seed: int = 0
    scale: str = "paper"

    @classmethod
    def for_scale(cls, scale: str, **overrides) -> "TrainConfig":
        """Full-budget defaults ("paper") or the reduced single-core budget ("desk")."""
        if scale not in SCALES:
            raise ConfigError(f"unknown scale {scale!r}; choose from {SCALES}")
        base = cls(scale=scale)
        if scale == "desk":
            base = replace(base, epochs=150, eval_steps=1000, explore_steps=1000,
                           train_loops=200, hidden=[64, 64], maze_scale=0.5,
                           max_episode_length=200, snapshot_every=0)
        return base.updated(**overrides)

    def updated(self, **overrides) -> "TrainConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = replace(self, **overrides)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.layout is None and self.rooms not in (2, 3, 4):
            raise ConfigError(f"rooms must be 2, 3 or 4 (or give a layout file), got {self.rooms}")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}")
        for name in ("batch_size", "buffer_capacity", "max_episode_length", "beams"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("eval_steps", "explore_steps", "train_loops", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 < self.gamma < 1.0 or not 0.0 < self.tau < 1.0:
            raise ConfigError("gamma and tau must lie in (0, 1)")
        ratios = self.coop_ratios if isinstance(self.coop_ratios, list) else [self.coop_ratios]
        if any(not 0.0 <= float(r) <= 1.0 for r in ratios):
            raise ConfigError(f"cooperative ratios must lie in [0, 1]: {self.coop_ratios}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        scale = data.pop("scale", "paper")
        return cls.for_scale(scale, **data)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    # -- derived objects -------------------------------------------------
    def maze(self) -> MazeSpec:
        spec = MazeSpec.load(self.layout) if self.layout else builtin_maze(self.rooms)
        return spec.scaled(self.maze_scale) if self.maze_scale != 1.0 else spec

    def env_config(self) -> EnvConfig:
        return EnvConfig(dt=self.dt, v_max=self.v_max, omega_max=self.omega_max,
                         beams=self.beams, max_range=self.max_range,
                         max_episode_steps=self.max_episode_length,
                         exit_bonus=self.exit_bonus, living_cost=self.living_cost)

    def sac_config(self) -> SacConfig:
        return SacConfig(hidden=tuple(self.hidden), activation=self.activation,
                         gamma=self.gamma, tau=self.tau, lr=self.learning_rate,
                         batch_size=self.batch_size, alpha_init=self.alpha_init,
                         auto_alpha=self.auto_alpha,
                         normalize_policy_critic=self.normalize_policy_critic,
                         literal_target=self.literal_target)


@dataclass
class EpochStats:
    epoch: int
    env_steps: int
    eval_success_rate: float
    eval_episodes: int
    returns: list[float]
    q_loss: list[float]
    pi_loss: list[float]
    alpha: list[float]
    sim_seconds: float
    wall_seconds: float = 0.0

    def csv_row(self) -> list[str]:
        vals = ([self.epoch, self.env_steps, _fmt(self.eval_success_rate)]
                + [_fmt(v) for v in self.returns + self.q_loss + self.pi_loss + self.alpha]
                + [_fmt(self.sim_seconds)])
        return [str(v) for v in vals]


def _fmt(v: float) -> str:
    return "nan" if v is None or not math.isfinite(v) else repr(float(v))


def metrics_header(subtasks: int, agents: int) -> list[str]:
    return (["epoch", "env_steps", "eval_success_rate"]
            + [f"return_sub{j}" for j in range(1, subtasks + 1)]
            + [f"q_loss_{j}" for j in range(1, agents + 1)]
            + [f"pi_loss_{j}" for j in range(1, agents + 1)]
            + [f"alpha_{j}" for j in range(1, agents + 1)]
            + ["seconds"])


def success_rate(logs) -> tuple[float, int]:
    """Successes over completed episodes; the trailing unfinished episode is not counted."""
    done = [log for log in logs if log.completed]
    if not done:
        return 0.0, 0
    return sum(log.success for log in done) / len(done), len(done)


class Experiment:
    """One training run: environments, trainer, bookkeeping, persistence."""

    def __init__(self, config: TrainConfig, out_dir: str | Path | None = None):
        config.validate()
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.spec = config.maze()
        env_cfg = config.env_config()
        seq = np.random.SeedSequence(config.seed)
        trainer_seq, eval_seq, expl_seq = seq.spawn(3)
        self.eval_env = MazeEnv(self.spec, env_cfg, np.random.default_rng(eval_seq))
        self.expl_env = MazeEnv(self.spec, env_cfg, np.random.default_rng(expl_seq))
        self.trainer = CooperativeTrainer(
            self.eval_env.observation_size, self.eval_env.action_size, self.spec.room_count,
            config.method, config.coop_ratios, config.sac_config(), config.buffer_capacity,
            config.warmup, trainer_seq)
        self.epoch = 0
        self.env_steps = 0
        self.history: list[EpochStats] = []
        self.buffer_writes = {"eval": 0, "explore": 0}

    @property
    def agent_count(self) -> int:
        return len(self.trainer.bundles)

    def _buffer_total(self) -> int:
        return sum(len(b.buffer) for b in self.trainer.bundles)

    def run_epoch(self) -> EpochStats:
        cfg = self.config
        t0 = time.perf_counter()
        before = self._buffer_total()
        eval_logs = self.trainer.gather_steps(self.eval_env, EVALUATION, cfg.eval_steps,
                                              store=False, deterministic=True)
        mid = self._buffer_total()
        self.trainer.gather_steps(self.expl_env, EXPLORATION, cfg.explore_steps,
                                  store=True, deterministic=False)
        self.buffer_writes["eval"] += mid - before
        self.buffer_writes["explore"] += self._buffer_total() - mid
        self.env_steps += cfg.eval_steps + cfg.explore_steps
        losses: dict[int, dict[str, list[float]]] = {
            b.index: {"q_loss": [], "pi_loss": [], "alpha": []} for b in self.trainer.bundles}
        for _ in range(cfg.train_loops):
            for n, vals in self.trainer.train_loop().items():
                for key, v in vals.items():
                    losses[n][key].append(v)
        rate, count = success_rate(eval_logs)
        completed = [log.returns for log in eval_logs if log.completed]
        returns = (np.mean(completed, axis=0).tolist() if completed
                   else [math.nan] * self.spec.room_count)
        self.epoch += 1

        def mean(vals):
            return float(np.mean(vals)) if vals else math.nan
        stats = EpochStats(
            epoch=self.epoch, env_steps=self.env_steps, eval_success_rate=rate,
            eval_episodes=count, returns=returns,
            q_loss=[mean(losses[b]["q_loss"]) for b in sorted(losses)],
            pi_loss=[mean(losses[b]["pi_loss"]) for b in sorted(losses)],
            alpha=[b.agent.alpha for b in self.trainer.bundles],
            sim_seconds=self.env_steps * cfg.dt, wall_seconds=time.perf_counter() - t0)
        self.history.append(stats)
        return stats

    def run(self, epochs: int | None = None) -> list[EpochStats]:
        """Train up to ``epochs`` total epochs (default: config), persisting as configured."""
        target = self.config.epochs if epochs is None else epochs
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._write_manifest()
            if self.epoch == 0 and self.config.checkpoint_every > 0:
                self.save_checkpoint(self.out_dir / "checkpoint.npz")
        while self.epoch < target:
            stats = self.run_epoch()
            logger.info("epoch %d success %.3f alpha %s", stats.epoch, stats.eval_success_rate,
                        ["%.3g" % a for a in stats.alpha])
            if self.out_dir is not None:
                self.write_metrics()
                every = self.config.checkpoint_every
                if every > 0 and (self.epoch % every == 0 or self.epoch == target):
                    self.save_checkpoint(self.out_dir / "checkpoint.npz")
                snap = self.config.snapshot_every
                if snap > 0 and self.epoch % snap == 0:
                    self.save_checkpoint(self.out_dir / f"agents_epoch{self.epoch:05d}.npz",
                                         include_buffers=False)
        return self.history

    # -- persistence -----------------------------------------------------
    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(metrics_header(self.spec.room_count, self.agent_count))
        for row in self.history:
            writer.writerow(row.csv_row())
        return buf.getvalue()

    def write_metrics(self) -> None:
        _atomic_write_text(self.out_dir / "metrics.csv", self.metrics_csv())
        timing = "epoch,seconds\n" + "".join(f"{s.epoch},{s.wall_seconds:.3f}\n"
                                              for s in self.history)
        _atomic_write_text(self.out_dir / "timing.csv", timing)

    def _write_manifest(self) -> None:
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "package_version": __version__,
            "code_version": _code_version(),
            "config": json.loads(self.config.to_json()),
            "seed": self.config.seed,
            "maze": self.spec.to_dict(),
            "constants": {"norm_eps": 1e-8, "log_std_bounds": [-20.0, 2.0],
                          "collision_clearance": 1e-3, "target_entropy": -2.0,
                          "target_form": "literal" if self.config.literal_target
                          else "r + gamma*(1-d)*(minQ' - alpha*logpi)"},
        }
        _atomic_write_text(self.out_dir / "manifest.json", json.dumps(manifest, indent=1) + "\n")

    def save_checkpoint(self, path: str | Path, include_buffers: bool = True) -> None:
        data = self.trainer.state_dict()
        if not include_buffers:
            data = {k: v for k, v in data.items() if ".buf." not in k}
        data["format"] = np.array(CHECKPOINT_FORMAT)
        data["config"] = np.array(self.config.to_json())
        data["counters"] = np.array([self.epoch, self.env_steps], dtype=np.int64)
        data["eval_rng"] = np.array(json.dumps(self.eval_env.rng.bit_generator.state))
        data["expl_rng"] = np.array(json.dumps(self.expl_env.rng.bit_generator.state))
        data["history"] = np.array(json.dumps([asdict(s) for s in self.history]))
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, **data)
        os.replace(tmp, path)

    @classmethod
    def from_checkpoint(cls, path: str | Path, out_dir: str | Path | None = None,
                        require_buffers: bool = True) -> "Experiment":
        with np.load(path) as data:
            if str(data["format"]) != CHECKPOINT_FORMAT:
                raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
            config = TrainConfig(**json.loads(str(data["config"])))
            exp = cls(config, out_dir)
            has_buffers = any(".buf." in k for k in data.files)
            if has_buffers:
                exp.trainer.load_state_dict(data)
            elif require_buffers:
                raise ConfigError(f"{path} holds no replay buffers; cannot resume training")
            else:
                for b in exp.trainer.bundles:
                    b.agent.load_state_dict(data, prefix=f"b{b.index}.")
            exp.epoch, exp.env_steps = (int(v) for v in data["counters"])
            exp.eval_env.rng.bit_generator.state = json.loads(str(data["eval_rng"]))
            exp.expl_env.rng.bit_generator.state = json.loads(str(data["expl_rng"]))
            exp.history = [EpochStats(**s) for s in json.loads(str(data["history"]))]
        return exp


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _code_version() -> str:
    """Content hash of the package sources (stable across checkouts of the same code)."""
    import hashlib
    digest = hashlib.sha256()
    root = Path(__file__).parent
    for src in sorted(root.glob("*.py")):
        digest.update(src.name.encode())
        digest.update(src.read_bytes())
    return digest.hexdigest()[:16]


def train(config: TrainConfig, out_dir: str | Path | None = None,
          resume: bool = False) -> Experiment:
    ckpt = Path(out_dir) / "checkpoint.npz" if out_dir is not None else None
    if resume and ckpt is not None and ckpt.exists():
        exp = Experiment.from_checkpoint(ckpt, out_dir)
        # only the epoch budget may change on resume
        if replace(exp.config, epochs=config.epochs) != config:
            raise ConfigError("checkpoint config differs from the requested config")
        exp.config = config
    else:
        exp = Experiment(config, out_dir)
    exp.run()
    return exp


def single_agent_mode(config: TrainConfig, out_dir: str | Path | None = None) -> SacAgent:
    """Train one end-to-end SAC agent on the summed subtask reward; returns the agent."""
    return train(replace(config, method=SINGLE), out_dir).trainer.bundles[0].agent


# -- evaluation & trajectories ------------------------------------------

def evaluate_checkpoint(path: str | Path, episodes: int = 100, seed: int = 0) -> float:
    exp = Experiment.from_checkpoint(path, require_buffers=False)
    env = MazeEnv(exp.spec, exp.config.env_config(), np.random.default_rng(seed))
    logs = [exp.trainer.gather_episode(env, EVALUATION, store=False, deterministic=True)
            for _ in range(episodes)]
    return sum(log.success for log in logs) / max(len(logs), 1)


def export_trajectories(path: str | Path, count: int = 20, critic: int = 2, seed: int = 0,
                        layout: MazeSpec | None = None) -> str:
    """CSV of ``count`` deterministic evaluation rollouts, coloured by one critic's value."""
    exp = Experiment.from_checkpoint(path, require_buffers=False)
    spec = layout or exp.spec
    env = MazeEnv(spec, exp.config.env_config(), np.random.default_rng(seed))
    obs_dim = exp.trainer.bundles[0].agent.obs_dim
    if env.observation_size != obs_dim or spec.room_count != exp.spec.room_count:
        raise ConfigError(f"maze gives {env.observation_size}-dim observations and "
                          f"{spec.room_count} rooms; checkpoint expects {obs_dim} and "
                          f"{exp.spec.room_count}")
    if not 1 <= critic <= len(exp.trainer.bundles):
        raise ConfigError(f"critic index {critic} outside 1..{len(exp.trainer.bundles)}")
    q_agent = exp.trainer.bundles[critic - 1].agent
    n = spec.room_count
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["episode", "t", "x", "y", "theta", "v", "omega", "subtask"]
                    + [f"r{j}" for j in range(1, n + 1)] + [f"q{critic}"])
    for ep in range(count):
        trace: list = []
        episode = exp.trainer.new_episode(env, EVALUATION)
        pos = (env.state.x, env.state.y, env.state.heading)
        while True:
            vec = episode["vec"]
            ended = exp.trainer.env_step(env, episode, EVALUATION, False, True, trace)
            subtask, _, _, action, (v, omega), res = trace[-1]
            q = float(q_agent.q_min_np(vec[None, :], np.asarray(action)[None, :])[0])
            writer.writerow([ep, len(trace) - 1, repr(pos[0]), repr(pos[1]), repr(pos[2]),
                             repr(v), repr(omega), subtask]
                            + [repr(float(r)) for r in res.rewards] + [repr(q)])
            pos = (env.state.x, env.state.y, env.state.heading)
            if ended:
                break
    return buf.getvalue()


# -- sweeps --------------------------------------------------------------

@dataclass
class SweepSpec:
    """Grid over cooperative ratios.

    ``axes`` holds one value list per cooperative policy; with ``shared=True``
    a single list is broadcast to every policy.
    """
    axes: list[list[float]]
    seeds: list[int]
    window: int = 50
    shared: bool = False

    def points(self, policies: int) -> list[tuple[float, ...]]:
        if self.shared:
            if len(self.axes) != 1:
                raise ConfigError("a shared-ratio sweep takes exactly one axis")
            return [(v,) * policies for v in self.axes[0]]
        if len(self.axes) != policies:
            raise ConfigError(f"{policies} cooperative policies need {policies} axes, "
                              f"got {len(self.axes)}")
        return list(itertools.product(*self.axes))

    def grid_size(self, policies: int) -> int:
        return len(self.points(policies)) * len(self.seeds)


def _sweep_worker(args) -> tuple[tuple, int, list[float] | None, str]:
    point, seed, config_json, out_dir = args
    try:
        cfg = TrainConfig(**json.loads(config_json))
        exp = train(cfg, out_dir)
        return point, seed, [s.eval_success_rate for s in exp.history], ""
    except Exception as exc:  # a failed point must not sink the sweep
        logger.exception("sweep point %s seed %s failed", point, seed)
        return point, seed, None, f"{type(exc).__name__}: {exc}"


def run_sweep(sweep: SweepSpec, config: TrainConfig, out_dir: str | Path | None = None,
              workers: int = 1) -> list[dict]:
    """Run every grid point x seed; returns one row per point with the trailing-window mean."""
    policies = config.maze().room_count - 1
    jobs = []
    for point in sweep.points(policies):
        for seed in sweep.seeds:
            cfg = replace(config, method=CSAC, coop_ratios=list(point), seed=seed)
            run_dir = None
            if out_dir is not None:
                tag = "-".join(f"{v:g}" for v in point)
                run_dir = str(Path(out_dir) / f"eta{tag}_seed{seed}")
            jobs.append((point, seed, cfg.to_json(), run_dir))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(job) for job in jobs]
    rows = []
    for point in sweep.points(policies):
        per_seed, failed = [], 0
        for p, seed, curve, err in results:
            if p != point:
                continue
            if curve is None:
                failed += 1
            else:
                per_seed.append(trailing_mean(curve, sweep.window))
        rows.append({"ratios": list(point),
                     "mean_success": float(np.mean(per_seed)) if per_seed else math.nan,
                     "per_seed": per_seed, "failed": failed})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _atomic_write_text(Path(out_dir) / "sweep.csv", sweep_table_csv(rows, policies))
    return rows


def trailing_mean(curve: Sequence[float], window: int) -> float:
    tail = list(curve)[-window:] if window > 0 else list(curve)
    return float(np.mean(tail)) if tail else math.nan


def sweep_table_csv(rows: list[dict], policies: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"eta_{i}" for i in range(1, policies + 1)]
                    + ["mean_success", "seeds_ok", "seeds_failed"])
    for row in rows:
        writer.writerow([f"{v:g}" for v in row["ratios"]]
                        + [_fmt(row["mean_success"]), len(row["per_seed"]), row["failed"]])
    return buf.getvalue()

"""Unicycle dynamics, laser observations and per-room rewards on a ``MazeSpec``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .maze import CLEARANCE, MazeSpec, raycast_fan, sweep_collision, wall_distance

EVALUATION = "evaluation"
EXPLORATION = "exploration"


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.1
    v_max: float = 1.0
    omega_max: float = math.pi
    beams: int = 16
    max_range: float = 10.0
    max_episode_steps: int = 1000
    exit_bonus: float = 10.0
    living_cost: float = 0.01
    spawn_clearance: float = 0.05


@dataclass
class AgentState:
    x: float
    y: float
    heading: float
    subtask: int


@dataclass
class Observation:
    laser: np.ndarray
    position: np.ndarray
    heading: np.ndarray  # (sin, cos)


@dataclass
class StepResult:
    observation: Observation
    rewards: np.ndarray
    subtask: int
    done: bool
    goal_reached: bool
    exits: np.ndarray  # per subtask: completed on this step
    collided: bool = False


def wrap_angle(theta: float) -> float:
    """Map an angle into [-pi, pi)."""
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


def compute_rewards(prev: AgentState, new: AgentState, spec: MazeSpec,
                    config: EnvConfig = EnvConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Reward vector and per-subtask completion flags for one step.

    The active subtask (room of ``prev``) pays the living cost unless it is
    completed on this step, in which case it earns the exit bonus. Crossing a
    door backwards revokes the bonus of the room being re-entered, so that
    every subtask nets exactly one bonus per successful traversal.
    """
    n = spec.room_count
    rewards = np.zeros(n)
    exits = np.zeros(n, dtype=bool)
    p, q = prev.subtask, new.subtask
    entered_goal = spec.in_goal(new.x, new.y) and not spec.in_goal(prev.x, prev.y)
    if q > p or (entered_goal and p == n):
        rewards[p - 1] = config.exit_bonus
        exits[p - 1] = True
    else:
        rewards[p - 1] = -config.living_cost
        if q < p:
            rewards[q - 1] = -config.exit_bonus
    return rewards, exits


class MazeEnv:
    """One independent simulator instance; owns its RNG and episode counter."""

    def __init__(self, spec: MazeSpec, config: EnvConfig = EnvConfig(),
                 rng: np.random.Generator | None = None):
        self.spec = spec
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng()
        self.beam_offsets = np.linspace(0.0, 2.0 * math.pi, config.beams, endpoint=False)
        self.state: AgentState | None = None
        self.steps = 0
        b = spec.bounds
        self._centre = np.array([(b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2])
        self._half = np.array([(b.x1 - b.x0) / 2, (b.y1 - b.y0) / 2])

    @property
    def observation_size(self) -> int:
        return self.config.beams + 4

    @property
    def action_size(self) -> int:
        return 2

    @property
    def subtask_count(self) -> int:
        return self.spec.room_count

    # -- observations ----------------------------------------------------
    def observe(self, state: AgentState | None = None) -> Observation:
        s = state or self.state
        laser = raycast_fan(self.spec.walls, s.x, s.y, s.heading + self.beam_offsets,
                            self.config.max_range)
        return Observation(laser, np.array([s.x, s.y]),
                           np.array([math.sin(s.heading), math.cos(s.heading)]))

    def encode(self, obs: Observation) -> np.ndarray:
        """Network input: ranges / max_range, position mapped to [-1, 1], sin, cos."""
        return np.concatenate([obs.laser / self.config.max_range,
                               (obs.position - self._centre) / self._half, obs.heading])

    # -- episode control -------------------------------------------------
    def reset(self, mode: str = EVALUATION) -> tuple[Observation, int]:
        if mode == EVALUATION:
            area = self.spec.start_area
            x = self.rng.uniform(area.x0, area.x1)
            y = self.rng.uniform(area.y0, area.y1)
        elif mode == EXPLORATION:
            x, y = self._sample_free_point()
        else:
            raise ValueError(f"unknown reset mode {mode!r}")
        heading = self.rng.uniform(-math.pi, math.pi)
        self.state = AgentState(x, y, heading, self.spec.room_of(x, y))
        self.steps = 0
        return self.observe(), self.state.subtask

    def _sample_free_point(self) -> tuple[float, float]:
        b = self.spec.bounds
        while True:
            x = self.rng.uniform(b.x0, b.x1)
            y = self.rng.uniform(b.y0, b.y1)
            if (self.spec.room_of(x, y) and not self.spec.in_goal(x, y)
                    and wall_distance(self.spec.walls, x, y) >= self.config.spawn_clearance):
                return x, y

    def set_state(self, state: AgentState) -> None:
        self.state = AgentState(state.x, state.y, wrap_angle(state.heading),
                                self.spec.room_of(state.x, state.y))
        self.steps = 0

    def scale_action(self, action) -> tuple[float, float]:
        """Map a squashed policy action in [-1, 1]^2 to (v, omega)."""
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        return float(a[0]) * self.config.v_max, float(a[1]) * self.config.omega_max

    def step(self, v: float, omega: float) -> StepResult:
        if self.state is None:
            raise RuntimeError("step() before reset()")
        if not (math.isfinite(v) and math.isfinite(omega)):
            raise ValueError(f"non-finite action ({v}, {omega})")
        cfg = self.config
        tol = 1e-9
        if abs(v) > cfg.v_max + tol or abs(omega) > cfg.omega_max + tol:
            raise ValueError(f"action ({v:.4g}, {omega:.4g}) outside "
                             f"[+-{cfg.v_max}, +-{cfg.omega_max:.4g}]")
        prev = self.state
        nx = prev.x + v * math.cos(prev.heading) * cfg.dt
        ny = prev.y + v * math.sin(prev.heading) * cfg.dt
        x, y, collided = sweep_collision(self.spec.walls, prev.x, prev.y, nx, ny, CLEARANCE)
        room = self.spec.room_of(x, y)
        if room == 0:  # numerically outside every room: refuse the move
            x, y, room, collided = prev.x, prev.y, prev.subtask, True
        new = AgentState(x, y, wrap_angle(prev.heading + omega * cfg.dt), room)
        rewards, exits = compute_rewards(prev, new, self.spec, cfg)
        goal = bool(exits[-1]) and prev.subtask == self.spec.room_count
        self.state = new
        self.steps += 1
        done = goal or self.steps >= cfg.max_episode_steps
        return StepResult(self.observe(), rewards, new.subtask, done, goal, exits, collided)

"""Cooperative SAC: sequential sub-agents whose policies blend their own and the
next agent's batch-normalized critics, plus the uncooperative and single-agent
baselines that share the same data-gathering machinery.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .env import EVALUATION, EXPLORATION, MazeEnv
from .replay import Batch, ReplayBuffer, TransitionRecord
from .sac import (SacAgent, SacConfig, compute_targets, critic_step, normalize_over_batch,
                  normalize_tensor, soft_target_update, terminal_mask, tune_alpha)

CSAC = "csac"
UNCOOPERATIVE = "uncooperative"
SINGLE = "single"
METHODS = (CSAC, UNCOOPERATIVE, SINGLE)


@dataclass
class AgentBundle:
    index: int  # 1-based subtask index
    agent: SacAgent
    buffer: ReplayBuffer


def normalize_q(q: Sequence[float]) -> np.ndarray:
    return normalize_over_batch(np.asarray(q, dtype=np.float64))[0]


def convex_combine(q_self, q_next, eta: float):
    """eta * q_self + (1 - eta) * q_next; works on arrays and tensors alike."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"cooperative ratio {eta} outside [0, 1]")
    if np.shape(q_self.data if isinstance(q_self, Tensor) else q_self) != \
            np.shape(q_next.data if isinstance(q_next, Tensor) else q_next):
        raise ValueError("critic batches differ in length")
    return q_self * eta + q_next * (1.0 - eta)


def cooperative_policy_loss(bundle: AgentBundle, next_bundle: AgentBundle | None,
                            states: np.ndarray, eta: float, noise: np.ndarray,
                            subtask_count: int | None = None,
                            norm_bounds: dict[int, tuple[float, float]] | None = None,
                            reads: Counter | None = None) -> tuple[Tensor, np.ndarray]:
    """(1/M) sum (alpha log pi_n(a'|s) - C(Q'_n, Q'_{n+1})(s, a')), a' ~ pi_n(s).

    Each critic term is the min over that agent's twin critics, min-max
    normalized over the batch (min/max detached). Without a next bundle the
    loss uses the own normalized critic only; that is allowed for the final
    subtask, or when ``eta == 1`` makes the next critic irrelevant.
    ``norm_bounds`` (keyed by bundle index) pins the normalization constants;
    ``reads`` counts which bundles' critics were evaluated.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"cooperative ratio {eta} outside [0, 1]")
    final = subtask_count is not None and bundle.index >= subtask_count
    if next_bundle is None and not final and subtask_count is not None and eta < 1.0:
        raise ValueError(f"bundle {bundle.index} of {subtask_count} needs the next bundle")
    if next_bundle is None or final:
        eta = 1.0
    agent = bundle.agent
    actions, logp = agent.sample(states, noise)
    bounds = norm_bounds or {}

    def critic_term(b: AgentBundle) -> Tensor:
        if reads is not None:
            reads[b.index] += 1
        return normalize_tensor(b.agent.q_min(states, actions, frozen=True), bounds.get(b.index))

    if eta == 1.0:
        combined = critic_term(bundle)
    elif eta == 0.0:
        combined = critic_term(next_bundle)
    else:
        combined = convex_combine(critic_term(bundle), critic_term(next_bundle), eta)
    loss = (logp * agent.alpha - combined).mean()
    return loss, logp.data.copy()


def train_critics_from_buffer(bundles: Sequence[AgentBundle], n: int, batch: Batch,
                              cross: bool = True,
                              sources: dict[int, Counter] | None = None) -> dict[int, float]:
    """Step critics n and n+1 (1-based) on a minibatch drawn from B_n.

    Targets for critic j use reward channel j and next actions from pi_n, the
    policy that produced the data. Returns {j: mean twin-critic loss}.
    """
    acting = bundles[n - 1].agent
    losses = {}
    for j in (n, n + 1):
        if j > len(bundles) or (j != n and not cross):
            continue
        target = bundles[j - 1].agent
        y = compute_targets(target, batch.rewards[:, j - 1], batch.next_states,
                            terminal_mask(batch, j - 1), acting, acting.noise(len(batch)))
        losses[j] = critic_step(target, batch.states, batch.actions, y)
        if sources is not None:
            sources[j][n] += 1
    return losses


@dataclass
class EpisodeLog:
    steps: int = 0
    success: bool = False
    completed: bool = False
    returns: np.ndarray | None = None
    subtasks: list[int] = field(default_factory=list)


class CooperativeTrainer:
    """Owns the per-subtask bundles and runs data gathering and training loops."""

    def __init__(self, obs_dim: int, act_dim: int, subtask_count: int, method: str = CSAC,
                 coop_ratios: Sequence[float] | float = 0.1, sac_config: SacConfig | None = None,
                 buffer_capacity: int = 1_000_000, warmup: int | None = None,
                 seed: int | np.random.SeedSequence = 0):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
        self.method = method
        self.subtask_count = subtask_count
        self.sac_config = sac_config or SacConfig()
        n_agents = 1 if method == SINGLE else subtask_count
        self.coop_ratios = self._ratios(coop_ratios, n_agents)
        reward_dim = 1 if method == SINGLE else subtask_count
        self.warmup = (max(self.sac_config.batch_size, 1000) if warmup is None
                       else max(warmup, self.sac_config.batch_size))
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self.bundles = [
            AgentBundle(i + 1,
                        SacAgent(obs_dim, act_dim, self.sac_config,
                                 np.random.default_rng(child)),
                        ReplayBuffer(buffer_capacity, obs_dim, act_dim, reward_dim))
            for i, child in enumerate(seq.spawn(n_agents))
        ]
        # audit trail: critic j <- buffers it was trained from; policy n -> critics it read
        self.critic_sources: dict[int, Counter] = {b.index: Counter() for b in self.bundles}
        self.policy_reads: dict[int, Counter] = {b.index: Counter() for b in self.bundles}

    def _ratios(self, ratios, n_agents: int) -> list[float]:
        if self.method != CSAC:
            return [1.0] * max(n_agents - 1, 0)
        if np.isscalar(ratios):
            ratios = [float(ratios)] * (n_agents - 1)
        ratios = [float(r) for r in ratios]
        if len(ratios) != n_agents - 1:
            raise ValueError(f"{n_agents} subtasks need {n_agents - 1} cooperative ratios, "
                             f"got {len(ratios)}")
        if any(not 0.0 <= r <= 1.0 for r in ratios):
            raise ValueError(f"cooperative ratios must lie in [0, 1]: {ratios}")
        return ratios

    # -- acting ----------------------------------------------------------
    def bundle_for(self, subtask: int) -> AgentBundle:
        return self.bundles[0] if self.method == SINGLE else self.bundles[subtask - 1]

    def stored_channels(self, rewards: np.ndarray, exits: np.ndarray, goal: bool):
        if self.method == SINGLE:
            return np.array([rewards.sum()]), np.array([goal])
        return rewards, exits

    def new_episode(self, env: MazeEnv, mode: str) -> dict:
        obs, n = env.reset(mode)
        return {"obs": obs, "vec": env.encode(obs), "n": n, "log": EpisodeLog(
            returns=np.zeros(env.subtask_count), subtasks=[])}

    def env_step(self, env: MazeEnv, episode: dict, mode: str, store: bool,
                 deterministic: bool, trace: list | None = None) -> bool:
        """Advance one step of ``episode``; returns True when the episode ended."""
        bundle = self.bundle_for(episode["n"])
        action = bundle.agent.act(episode["vec"], deterministic=deterministic)
        v, omega = env.scale_action(action)
        res = env.step(v, omega)
        next_vec = env.encode(res.observation)
        if store:
            rewards, exits = self.stored_channels(res.rewards, res.exits, res.goal_reached)
            bundle.buffer.push(TransitionRecord(episode["vec"], action, rewards, next_vec,
                                                res.goal_reached, exits))
        log: EpisodeLog = episode["log"]
        log.subtasks.append(episode["n"])
        if trace is not None:
            trace.append((episode["n"], bundle.index, env.state, action, (v, omega), res))
        log.steps += 1
        log.returns += res.rewards
        episode["obs"], episode["vec"], episode["n"] = res.observation, next_vec, res.subtask
        if res.done:
            log.completed = True
            log.success = res.goal_reached
        return res.done

    def gather_episode(self, env: MazeEnv, mode: str = EXPLORATION, store: bool = True,
                       deterministic: bool = False, trace: list | None = None) -> EpisodeLog:
        """Roll out one full episode with hand-off to the bundle of the current room."""
        episode = self.new_episode(env, mode)
        while not self.env_step(env, episode, mode, store, deterministic, trace):
            pass
        return episode["log"]

    def gather_steps(self, env: MazeEnv, mode: str, steps: int, store: bool,
                     deterministic: bool) -> list[EpisodeLog]:
        """Run exactly ``steps`` environment steps; the trailing partial episode is
        returned with ``completed=False``."""
        logs = []
        episode = None
        for _ in range(steps):
            if episode is None:
                episode = self.new_episode(env, mode)
            if self.env_step(env, episode, mode, store, deterministic):
                logs.append(episode["log"])
                episode = None
        if episode is not None:
            logs.append(episode["log"])
        return logs

    # -- training --------------------------------------------------------
    def ready(self, bundle: AgentBundle) -> bool:
        return len(bundle.buffer) >= self.warmup

    def train_loop(self) -> dict[int, dict[str, float]]:
        """One pass over all bundles; returns per-bundle losses for those that trained."""
        if self.method == SINGLE:
            bundle = self.bundles[0]
            if not self.ready(bundle):
                return {}
            batch = bundle.buffer.sample(self.sac_config.batch_size, bundle.agent.rng)
            self.critic_sources[1][1] += 1
            self.policy_reads[1][1] += 1
            return {1: bundle.agent.update(batch, channel=0)}
        out = {}
        count = len(self.bundles)
        cross = self.method == CSAC
        for bundle in self.bundles:
            if not self.ready(bundle):
                continue
            n, agent = bundle.index, bundle.agent
            batch = bundle.buffer.sample(self.sac_config.batch_size, agent.rng)
            q_losses = train_critics_from_buffer(self.bundles, n, batch, cross,
                                                 self.critic_sources)
            nxt = self.bundles[n] if cross and n < count else None
            eta = self.coop_ratios[n - 1] if n < count else 1.0
            loss, logp = cooperative_policy_loss(bundle, nxt, batch.states, eta,
                                                 agent.noise(len(batch)), count,
                                                 reads=self.policy_reads[n])
            agent.policy_opt.zero_grad()
            loss.backward()
            agent.policy_opt.step()
            tune_alpha(agent, logp)
            for j in q_losses:
                soft_target_update(self.bundles[j - 1].agent)
            out[n] = {"q_loss": q_losses[n], "pi_loss": loss.item(), "alpha": agent.alpha}
        return out

    # -- checkpointing ---------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for b in self.bundles:
            out.update(b.agent.state_dict(prefix=f"b{b.index}."))
            out.update(b.buffer.state_dict(prefix=f"b{b.index}.buf."))
        return out

    def load_state_dict(self, data) -> None:
        for b in self.bundles:
            b.agent.load_state_dict(data, prefix=f"b{b.index}.")
            b.buffer = ReplayBuffer.from_state_dict(data, prefix=f"b{b.index}.buf.")


__all__ = ["AgentBundle", "CooperativeTrainer", "convex_combine", "cooperative_policy_loss",
           "normalize_q", "train_critics_from_buffer", "CSAC", "UNCOOPERATIVE", "SINGLE",
           "METHODS", "EVALUATION", "EXPLORATION"]

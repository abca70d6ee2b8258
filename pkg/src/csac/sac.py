"""Soft Actor-Critic with twin critics, target networks and learned temperature."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (Adam, Mlp, Tensor, concat, exp, minimum, parameter,
                       sample_squashed_gaussian)
from .replay import Batch

NORM_EPS = 1e-8


@dataclass
class SacConfig:
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "relu"
    gamma: float = 0.95
    tau: float = 0.005
    lr: float = 3e-4
    batch_size: int = 256
    # the policy sees critics normalized to [0, 1]; alpha = 1 would swamp them
    alpha_init: float = 0.01
    auto_alpha: bool = True
    target_entropy: float | None = None  # None -> -action_dim
    normalize_policy_critic: bool = True
    # r + (1 - gamma) * (...) with no done mask, a variant kept for ablation only
    literal_target: bool = False


def normalize_over_batch(q: np.ndarray, eps: float = NORM_EPS) -> tuple[np.ndarray, float, float]:
    """(q - min) / (max - min + eps); a constant batch maps to zeros."""
    q = np.asarray(q, dtype=np.float64)
    lo, hi = float(q.min()), float(q.max())
    return (q - lo) / (hi - lo + eps), lo, hi


def normalize_tensor(q: Tensor, bounds: tuple[float, float] | None = None,
                     eps: float = NORM_EPS) -> Tensor:
    """Batch min-max normalization with the min/max held constant (not differentiated)."""
    lo, hi = bounds if bounds is not None else (float(q.data.min()), float(q.data.max()))
    return (q - lo) * (1.0 / (hi - lo + eps))


def terminal_mask(batch: Batch, channel: int) -> np.ndarray:
    """Bootstrapping stops when the episode ends or the channel's subtask is completed."""
    return (batch.dones | batch.exits[:, channel]).astype(np.float64)


class SacAgent:
    def __init__(self, obs_dim: int, act_dim: int, config: SacConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config or SacConfig()
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.rng = rng if rng is not None else np.random.default_rng()
        c = self.config
        hidden = list(c.hidden)
        self.policy = Mlp([obs_dim] + hidden + [2 * act_dim], self.rng, c.activation)
        self.q1 = Mlp([obs_dim + act_dim] + hidden + [1], self.rng, c.activation)
        self.q2 = Mlp([obs_dim + act_dim] + hidden + [1], self.rng, c.activation)
        self.q1_target = Mlp([obs_dim + act_dim] + hidden + [1], self.rng, c.activation)
        self.q2_target = Mlp([obs_dim + act_dim] + hidden + [1], self.rng, c.activation)
        self.q1_target.copy_from(self.q1)
        self.q2_target.copy_from(self.q2)
        self.log_alpha = parameter([math.log(c.alpha_init)])
        self.target_entropy = (-float(act_dim) if c.target_entropy is None
                               else float(c.target_entropy))
        self.policy_opt = Adam(self.policy.parameters(), lr=c.lr)
        self.q1_opt = Adam(self.q1.parameters(), lr=c.lr)
        self.q2_opt = Adam(self.q2.parameters(), lr=c.lr)
        self.alpha_opt = Adam([self.log_alpha], lr=c.lr)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data[0]))

    @property
    def critics(self) -> tuple[Mlp, Mlp]:
        return self.q1, self.q2

    # -- policy ----------------------------------------------------------
    def policy_head(self, states, frozen: bool = False) -> tuple[Tensor, Tensor]:
        out = self.policy.forward(states, frozen=frozen)
        d = self.act_dim
        return out[:, :d], out[:, d:]

    def sample(self, states, noise) -> tuple[Tensor, Tensor]:
        """Reparameterized actions and log-probs, differentiable w.r.t. the policy."""
        mean, log_std = self.policy_head(states)
        return sample_squashed_gaussian(mean, log_std, noise)

    def sample_np(self, states: np.ndarray, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.policy.forward_np(states)
        d = self.act_dim
        action, logp = sample_squashed_gaussian(Tensor(out[:, :d]), Tensor(out[:, d:]), noise)
        return action.data, logp.data

    def act(self, obs: np.ndarray, deterministic: bool = False) -> np.ndarray:
        out = self.policy.forward_np(np.asarray(obs).reshape(1, -1))[0]
        mean = out[: self.act_dim]
        if deterministic:
            return np.tanh(mean)
        log_std = np.clip(out[self.act_dim:], -20.0, 2.0)
        return np.tanh(mean + np.exp(log_std) * self.rng.standard_normal(self.act_dim))

    def noise(self, batch_size: int) -> np.ndarray:
        return self.rng.standard_normal((batch_size, self.act_dim))

    # -- critics ---------------------------------------------------------
    def q_min(self, states, actions, frozen: bool = True) -> Tensor:
        """min(Q1, Q2)(s, a) as a (M,) tensor; frozen critics pass gradient to ``actions`` only."""
        sa = concat([Tensor(states) if not isinstance(states, Tensor) else states, actions], 1)
        q1 = self.q1.forward(sa, frozen=frozen)
        q2 = self.q2.forward(sa, frozen=frozen)
        return minimum(q1, q2).reshape(-1)

    def q_min_np(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        sa = np.concatenate([states, actions], axis=1)
        return np.minimum(self.q1.forward_np(sa), self.q2.forward_np(sa)).reshape(-1)

    def target_q_min_np(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        sa = np.concatenate([states, actions], axis=1)
        return np.minimum(self.q1_target.forward_np(sa),
                          self.q2_target.forward_np(sa)).reshape(-1)

    # -- standalone update ----------------------------------------------
    def update(self, batch: Batch, channel: int = 0) -> dict[str, float]:
        """One SAC step on reward channel ``channel``: critics, policy, temperature, targets."""
        targets = compute_targets(self, batch.rewards[:, channel], batch.next_states,
                                  terminal_mask(batch, channel), self, self.noise(len(batch)))
        q_loss = critic_step(self, batch.states, batch.actions, targets)
        pi_loss, logp = sac_policy_loss(self, batch.states, self.noise(len(batch)))
        self.policy_opt.zero_grad()
        pi_loss.backward()
        self.policy_opt.step()
        tune_alpha(self, logp)
        soft_target_update(self)
        return {"q_loss": q_loss, "pi_loss": pi_loss.item(), "alpha": self.alpha}

    # -- checkpointing ---------------------------------------------------
    def networks(self) -> dict[str, Mlp]:
        return {"policy": self.policy, "q1": self.q1, "q2": self.q2,
                "q1_target": self.q1_target, "q2_target": self.q2_target}

    def optimizers(self) -> dict[str, Adam]:
        return {"policy": self.policy_opt, "q1": self.q1_opt, "q2": self.q2_opt,
                "alpha": self.alpha_opt}

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, net in self.networks().items():
            for i, arr in enumerate(net.state_arrays()):
                out[f"{prefix}net.{name}.{i}"] = arr.copy()
        for name, opt in self.optimizers().items():
            st = opt.state
            out[f"{prefix}opt.{name}.step"] = np.array(st.step_count, dtype=np.int64)
            for i, (m, v) in enumerate(zip(st.first_moment, st.second_moment)):
                out[f"{prefix}opt.{name}.m.{i}"] = m.copy()
                out[f"{prefix}opt.{name}.v.{i}"] = v.copy()
        out[f"{prefix}log_alpha"] = self.log_alpha.data.copy()
        out[f"{prefix}rng"] = np.array(json.dumps(self.rng.bit_generator.state))
        return out

    def load_state_dict(self, data, prefix: str = "") -> None:
        for name, net in self.networks().items():
            count = len(net.parameters())
            net.load_arrays([data[f"{prefix}net.{name}.{i}"] for i in range(count)])
        for name, opt in self.optimizers().items():
            st = opt.state
            st.step_count = int(data[f"{prefix}opt.{name}.step"])
            for i in range(len(st.first_moment)):
                st.first_moment[i] = np.array(data[f"{prefix}opt.{name}.m.{i}"])
                st.second_moment[i] = np.array(data[f"{prefix}opt.{name}.v.{i}"])
        self.log_alpha.data = np.array(data[f"{prefix}log_alpha"], dtype=np.float64)
        self.rng.bit_generator.state = json.loads(str(data[f"{prefix}rng"]))


def compute_targets(agent: SacAgent, rewards: np.ndarray, next_states: np.ndarray,
                    dones: np.ndarray, acting: SacAgent, noise: np.ndarray) -> np.ndarray:
    """Soft Bellman targets for ``agent``'s critics with next actions from ``acting``.

    y = r + gamma * (1 - d) * (min target Q(s', a') - alpha * log pi(a'|s')),
    a' ~ acting(s'), alpha being the acting policy's temperature. Plain arrays,
    so nothing downstream can back-propagate into the targets.
    """
    next_actions, next_logp = acting.sample_np(next_states, noise)
    soft_q = agent.target_q_min_np(next_states, next_actions) - acting.alpha * next_logp
    rewards = np.asarray(rewards, dtype=np.float64)
    if agent.config.literal_target:
        y = rewards + (1.0 - agent.config.gamma) * soft_q
    else:
        y = rewards + agent.config.gamma * (1.0 - np.asarray(dones, dtype=np.float64)) * soft_q
    if not np.all(np.isfinite(y)):
        raise FloatingPointError(f"non-finite Bellman targets "
                                 f"({np.count_nonzero(~np.isfinite(y))} of {len(y)})")
    return y


def critic_loss(critic: Mlp, states: np.ndarray, actions: np.ndarray,
                targets: np.ndarray) -> Tensor:
    """Mean squared Bellman error (1/M) * sum (Q(s,a) - y)^2."""
    q = critic.forward(np.concatenate([states, actions], axis=1)).reshape(-1)
    if q.shape != np.shape(targets):
        raise ValueError(f"critic output {q.shape} vs targets {np.shape(targets)}")
    diff = q - targets
    return (diff * diff).mean()


def critic_step(agent: SacAgent, states, actions, targets) -> float:
    """One Adam step on each twin critic; returns the mean of the two losses."""
    total = 0.0
    for critic, opt in ((agent.q1, agent.q1_opt), (agent.q2, agent.q2_opt)):
        loss = critic_loss(critic, states, actions, targets)
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += loss.item()
    return 0.5 * total


def sac_policy_loss(agent: SacAgent, states: np.ndarray, noise: np.ndarray,
                    norm_bounds: tuple[float, float] | None = None) -> tuple[Tensor, np.ndarray]:
    """(1/M) * sum (alpha * log pi(a'|s) - Q(s, a')) with a' reparameterized from ``noise``.

    Q is the min over the twin critics; when ``normalize_policy_critic`` is set
    it is min-max normalized over the batch first. Returns the loss and the
    (detached) log-probs for the temperature update.
    """
    actions, logp = agent.sample(states, noise)
    q = agent.q_min(states, actions, frozen=True)
    if agent.config.normalize_policy_critic:
        q = normalize_tensor(q, norm_bounds)
    loss = (logp * agent.alpha - q).mean()
    return loss, logp.data.copy()


def soft_target_update(agent: SacAgent, tau: float | None = None) -> None:
    tau = agent.config.tau if tau is None else tau
    for net, target in ((agent.q1, agent.q1_target), (agent.q2, agent.q2_target)):
        for p, tp in zip(net.parameters(), target.parameters()):
            tp.data = (1.0 - tau) * tp.data + tau * p.data


def alpha_loss(agent: SacAgent, logp: np.ndarray) -> Tensor:
    """-(1/M) * sum alpha * (log pi + target_entropy), differentiated through log alpha."""
    gap = np.asarray(logp, dtype=np.float64) + agent.target_entropy
    return -(exp(agent.log_alpha) * float(gap.mean())).sum()


def tune_alpha(agent: SacAgent, logp: np.ndarray) -> float:
    if agent.config.auto_alpha:
        loss = alpha_loss(agent, logp)
        agent.alpha_opt.zero_grad()
        loss.backward()
        agent.alpha_opt.step()
    return agent.alpha


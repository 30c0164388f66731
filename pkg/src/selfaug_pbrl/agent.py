"""Soft Actor-Critic with a relabelable replay buffer and k-NN intrinsic reward."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .approx import MLP, AdamState, MLPSpec, NonFiniteGradientError, ScalarAdam, adam_step, kernels
from .core import StateLayout, TrajectorySegment

log = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
MIN_NEIGHBOR_DISTANCE = 1e-6
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class NonFiniteLossError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """Ring store of transitions with episode bookkeeping.

    ``stored_rewards`` is what SAC trains on: intrinsic rewards during
    pretraining, reward-model outputs after each relabel pass. Privileged
    rewards live in a private array reachable through :meth:`oracle_rewards`
    and :meth:`segment`.
    """

    def __init__(self, obs_dims: int, action_dims: int, capacity: int):
        self.capacity = int(capacity)
        self.obs_dims = obs_dims
        self.action_dims = action_dims
        self.states = np.zeros((capacity, obs_dims))
        self.actions = np.zeros((capacity, action_dims))
        self.stored_rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, obs_dims))
        self.terminals = np.zeros(capacity, dtype=bool)
        self._privileged = np.zeros(capacity)
        self.episode_ids = np.full(capacity, -1, dtype=np.int64)
        self.episode_steps = np.zeros(capacity, dtype=np.int64)
        self.ptr = 0
        self.size = 0
        # episode_id -> (first ring index, length); oldest first
        self.episodes: dict[int, list[int]] = {}

    def __len__(self):
        return self.size

    def add(self, state, action, stored_reward, next_state, terminal, privileged_reward, episode_id, step):
        i = self.ptr
        old = int(self.episode_ids[i])
        if self.size == self.capacity and old in self.episodes:
            rec = self.episodes[old]
            rec[0] = (rec[0] + 1) % self.capacity
            rec[1] -= 1
            if rec[1] <= 0:
                del self.episodes[old]
        self.states[i] = state
        self.actions[i] = action
        self.stored_rewards[i] = stored_reward
        self.next_states[i] = next_state
        self.terminals[i] = terminal
        self._privileged[i] = privileged_reward
        self.episode_ids[i] = episode_id
        self.episode_steps[i] = step
        if episode_id in self.episodes:
            self.episodes[episode_id][1] += 1
        else:
            self.episodes[episode_id] = [i, 1]
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size < 1:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=batch_size)

    def batch(self, idx):
        return (
            self.states[idx],
            self.actions[idx],
            self.stored_rewards[idx],
            self.next_states[idx],
            self.terminals[idx],
        )

    def oracle_rewards(self, idx=None) -> np.ndarray:
        from .core import privileged_access

        privileged_access["buffer"] += 1
        return self._privileged[: self.size] if idx is None else self._privileged[idx]

    def recent_episodes(self, n: int, min_len: int) -> list[int]:
        eligible = [e for e, (_, length) in self.episodes.items() if length >= min_len]
        return eligible[-n:]

    def segment(self, episode_id: int, start: int, H: int, layout: StateLayout) -> TrajectorySegment:
        """H consecutive post-transition states of one episode, starting at offset ``start``."""
        first, length = self.episodes[episode_id]
        if start < 0 or start + H > length:
            raise IndexError(f"segment [{start}, {start + H}) outside episode of length {length}")
        idx = (first + start + np.arange(H)) % self.capacity
        return TrajectorySegment(
            states=self.next_states[idx],
            layout=layout,
            privileged_rewards=self._privileged[idx],
            actions=self.actions[idx],
            episode_id=episode_id,
            start_step=int(self.episode_steps[idx[0]]),
        )

    def fingerprint(self) -> int:
        """Hash of everything relabeling must leave alone."""
        n = self.size
        parts = (
            self.states[:n],
            self.actions[:n],
            self.next_states[:n],
            self.terminals[:n],
            self._privileged[:n],
            self.episode_ids[:n],
        )
        return hash(b"".join(np.ascontiguousarray(p).tobytes() for p in parts))


def relabel(buffer: ReplayBuffer, reward_fn, chunk: int = 8192, renormalize: bool = False) -> int:
    """Overwrite every stored reward with ``reward_fn(next_state)``; returns the count."""
    n = buffer.size
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        buffer.stored_rewards[lo:hi] = np.asarray(reward_fn(buffer.next_states[lo:hi]), dtype=np.float64).reshape(-1)
    if renormalize and n > 1:
        r = buffer.stored_rewards[:n]
        std = r.std()
        buffer.stored_rewards[:n] = (r - r.mean()) / (std if std > 0 else 1.0)
    return n


def intrinsic_reward(state, buffer_sample, k: int = 5) -> float:
    """log of the distance from ``state`` to its k-th nearest neighbour in ``buffer_sample``."""
    sample = np.atleast_2d(np.asarray(buffer_sample, dtype=np.float64))
    if not 1 <= k <= sample.shape[0]:
        raise ValueError(f"need 1 <= k <= {sample.shape[0]}, got k={k}")
    d = float(kernels.kth_nearest_distance(np.asarray(state, dtype=np.float64)[None, :], sample, k)[0])
    return float(np.log(max(d, MIN_NEIGHBOR_DISTANCE)))


# ---------------------------------------------------------------------------
# SAC


@dataclass
class SacConfig:
    hidden_layers: int = 3
    hidden_units: int = 256
    lr: float = 3e-4
    batch_size: int = 512
    discount: float = 0.99
    tau: float = 0.005
    init_temperature: float = 0.1
    critic_target_update_freq: int = 2
    actor_update_freq: int = 1
    alpha_lr: float = 3e-4
    learn_temperature: bool = True


def _softplus(x):
    return np.logaddexp(0.0, x)


class SacAgent:
    def __init__(self, obs_dims: int, action_dims: int, config: SacConfig, rng: np.random.Generator):
        self.obs_dims = obs_dims
        self.action_dims = action_dims
        self.config = config
        self.rng = rng
        c = config
        self.actor_spec = MLPSpec(obs_dims, 2 * action_dims, c.hidden_layers, c.hidden_units, "relu")
        self.critic_spec = MLPSpec(obs_dims + action_dims, 1, c.hidden_layers, c.hidden_units, "relu")
        self.actor = MLP.create(self.actor_spec, rng)
        self.critics = [MLP.create(self.critic_spec, rng), MLP.create(self.critic_spec, rng)]
        self.targets = [q.copy() for q in self.critics]
        self.actor_opt = AdamState.for_params(self.actor.params, lr=c.lr)
        self.critic_opts = [AdamState.for_params(q.params, lr=c.lr) for q in self.critics]
        self.log_alpha = ScalarAdam(float(np.log(c.init_temperature)), lr=c.alpha_lr)
        self.target_entropy = -float(action_dims)
        self.critic_updates = 0
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.value))

    def reset_critics(self):
        """Fresh critics, targets and critic optimizers (done once after pretraining)."""
        self.critics = [MLP.create(self.critic_spec, self.rng), MLP.create(self.critic_spec, self.rng)]
        self.targets = [q.copy() for q in self.critics]
        self.critic_opts = [AdamState.for_params(q.params, lr=self.config.lr) for q in self.critics]

    # -- policy -------------------------------------------------------------

    def _policy_heads(self, out):
        A = self.action_dims
        mu = out[:, :A]
        squashed = np.tanh(out[:, A:])
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (squashed + 1.0)
        return mu, squashed, log_std

    def _sample(self, states, noise):
        """Reparameterized tanh-Gaussian sample; returns everything backward needs."""
        out, cache = self.actor.forward_cached(states)
        mu, squashed, log_std = self._policy_heads(out)
        std = np.exp(log_std)
        u = mu + std * noise
        a = np.tanh(u)
        log_prob = np.sum(-0.5 * noise * noise - log_std - _HALF_LOG_2PI, axis=1)
        log_prob -= np.sum(2.0 * (np.log(2.0) - u - _softplus(-2.0 * u)), axis=1)
        return a, log_prob, (cache, squashed, std, noise)

    def act(self, state, deterministic: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        out = self.actor(np.asarray(state, dtype=np.float64)[None, :])
        if not np.all(np.isfinite(out)):
            raise NonFiniteLossError("actor produced a non-finite output")
        mu, _, log_std = self._policy_heads(out)
        if deterministic:
            return np.tanh(mu[0])
        rng = rng or self.rng
        u = mu[0] + np.exp(log_std[0]) * rng.standard_normal(self.action_dims)
        # clip keeps float rounding from producing exactly +-1
        return np.clip(np.tanh(u), -1.0 + 1e-12, 1.0 - 1e-12)

    # -- losses ---------------------------------------------------------------

    def critic_target(self, rewards, next_states, next_noise, discount=None):
        discount = self.config.discount if discount is None else discount
        a2, logp2, _ = self._sample(next_states, next_noise)
        sa2 = np.concatenate([next_states, a2], axis=1)
        q_next = np.minimum(self.targets[0](sa2), self.targets[1](sa2))[:, 0]
        return rewards + discount * (q_next - self.alpha * logp2)

    def critic_loss_and_grads(self, states, actions, target):
        sa = np.concatenate([states, actions], axis=1)
        B = states.shape[0]
        loss = 0.0
        grads = []
        for q in self.critics:
            pred, cache = q.forward_cached(sa)
            err = pred[:, 0] - target
            loss += float(np.mean(err * err))
            grads.append(q.backward_cached(cache, (2.0 / B) * err[:, None]))
        return loss, grads

    def actor_loss_and_grads(self, states, noise):
        B, A = states.shape[0], self.action_dims
        alpha = self.alpha
        a, logp, (cache, squashed, std, eps) = self._sample(states, noise)
        sa = np.concatenate([states, a], axis=1)
        q_outs = [q.forward_cached(sa) for q in self.critics]
        q1, q2 = q_outs[0][0][:, 0], q_outs[1][0][:, 0]
        use_first = q1 <= q2
        q_min = np.where(use_first, q1, q2)
        loss = float(np.mean(alpha * logp - q_min))
        dq_da = np.zeros((B, A))
        for which, (q, (_, qcache)) in enumerate(zip(self.critics, q_outs)):
            mask = use_first if which == 0 else ~use_first
            if not mask.any():
                continue
            _, gx = q.backward_cached(qcache, mask[:, None].astype(np.float64), need_input_grad=True, need_param_grads=False)
            dq_da += gx[:, self.obs_dims :]
        g_u = (alpha * 2.0 * a - (1.0 - a * a) * dq_da) / B
        g_log_std = -alpha / B + g_u * std * eps
        g_raw = g_log_std * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - squashed * squashed)
        grads = self.actor.backward_cached(cache, np.concatenate([g_u, g_raw], axis=1))
        return loss, grads, logp

    # -- update ---------------------------------------------------------------

    def update(self, buffer: ReplayBuffer, batch_size: int | None = None, discount: float | None = None) -> dict:
        """One SAC step: critics, then actor and temperature, then (every 2nd) target EMA."""
        c = self.config
        batch_size = batch_size or c.batch_size
        if buffer.size < batch_size:
            raise ValueError(f"buffer holds {buffer.size} transitions, need {batch_size}")
        idx = buffer.sample_indices(batch_size, self.rng)
        s, a, r, s2, _ = buffer.batch(idx)
        target = self.critic_target(r, s2, self.rng.standard_normal((batch_size, self.action_dims)), discount)
        critic_loss, critic_grads = self.critic_loss_and_grads(s, a, target)
        if not np.isfinite(critic_loss):
            raise NonFiniteLossError(
                f"critic loss {critic_loss}; reward mean {r.mean():.4g} std {r.std():.4g}, "
                f"target mean {np.mean(target):.4g}"
            )
        try:
            for q, g, opt in zip(self.critics, critic_grads, self.critic_opts):
                adam_step(q.params, g, opt)
        except NonFiniteGradientError as exc:
            raise NonFiniteLossError(f"critic gradient: {exc}") from exc
        self.critic_updates += 1
        report = {"critic_loss": critic_loss}

        if self.updates % c.actor_update_freq == 0:
            actor_loss, actor_grads, logp = self.actor_loss_and_grads(s, self.rng.standard_normal((batch_size, self.action_dims)))
            if not np.isfinite(actor_loss):
                raise NonFiniteLossError(f"actor loss {actor_loss}")
            adam_step(self.actor.params, actor_grads, self.actor_opt)
            entropy_gap = -logp - self.target_entropy
            report["actor_loss"] = actor_loss
            report["alpha_loss"] = float(self.alpha * np.mean(entropy_gap))
            if c.learn_temperature:
                self.log_alpha.update(self.alpha * float(np.mean(entropy_gap)))
        if self.critic_updates % c.critic_target_update_freq == 0:
            self.soft_update_targets()
        self.updates += 1
        report["alpha"] = self.alpha
        return report

    def soft_update_targets(self, tau: float | None = None):
        tau = self.config.tau if tau is None else tau
        for q, t in zip(self.critics, self.targets):
            for p, tp in zip(q.params, t.params):
                tp *= 1.0 - tau
                tp += tau * p

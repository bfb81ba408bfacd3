"""Rollouts, GAE, PPO updates, and best-response training on the gridworld.

The pooled baseline trains one actor-critic with PPO on environments from
every domain; the per-domain trainer gives each domain its own net and, in
a fixed domain order, collects a rollout on that domain's environments with
the score-averaged policy, then runs one PPO update in which gradients flow
into that domain's net only (the others stay frozen). Both paths share one
core, so a single domain reduces the best-response trainer to plain PPO
bit for bit.

Determinism: every stream (net init, action sampling, minibatch shuffling,
per-slot layout resets) is derived from the master seed by label, so a run
is a pure function of (config, master seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gridworld
from .policy_nn import (
    ActorCriticNet,
    AdamState,
    PolicyEnsemble,
    adam_step,
    clip_grads_,
    log_softmax,
    mean_scores_batch,
    softmax,
)
from .seeding import derive_seed, make_rng


@dataclass(frozen=True)
class PpoConfig:
    n_steps: int = 128          # time-steps per rollout per environment
    epochs: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    batch_size: int = 256
    entropy_coef: float = 0.01
    clip_range: float = 0.2
    value_coef: float = 0.5
    lr: float = 1e-3            # 0.001 pooled PPO, 0.0005 best-response
    total_steps: int = 120_000
    max_grad_norm: float = 0.5
    n_envs: int = 16            # parallel envs, pooled baseline
    n_envs_per_domain: int = 16  # parallel envs per domain, best-response
    embedding: str = "raw"      # observation embedding fed to the nets

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_range <= 0.0:
            raise ValueError("clip_range must be positive")


@dataclass
class EnvSlot:
    """One parallel environment; resets draw a fresh layout from its pool."""

    pool: list                      # (color, layout_seed) choices
    rng: np.random.Generator
    env: gridworld.GridEnv | None = None
    ep_return: float = 0.0
    ep_len: int = 0

    def reset(self):
        color, seed = self.pool[int(self.rng.integers(len(self.pool)))]
        self.env = gridworld.generate_env(color, seed)
        self.ep_return = 0.0
        self.ep_len = 0


def make_slots(pool, master_seed: int, domain: int, count: int) -> list[EnvSlot]:
    """Env slots with per-slot reset streams (worker layout is seed-stable)."""
    slots = [
        EnvSlot(pool, make_rng(derive_seed(master_seed, "env", domain, i)))
        for i in range(count)
    ]
    for s in slots:
        s.reset()
    return slots


@dataclass
class RolloutBuffer:
    obs: np.ndarray        # (E, T, 5, 5, 3) int8
    actions: np.ndarray    # (E, T) int64
    logp: np.ndarray       # (E, T) behavior log-probabilities
    rewards: np.ndarray    # (E, T)
    values: np.ndarray     # (E, T)
    dones: np.ndarray      # (E, T) bool
    bootstrap: np.ndarray  # (E,) value of the state after the last step
    episode_returns: list = field(default_factory=list)

    @property
    def total_steps(self) -> int:
        return self.obs.shape[0] * self.obs.shape[1]

    def mean_episode_reward(self) -> float:
        if not self.episode_returns:
            return float("nan")
        return float(np.mean(self.episode_returns))

    @classmethod
    def from_arrays(cls, rewards, values, dones, bootstrap):
        """Reward/value-only buffer, enough for advantage computations."""
        e, t = np.asarray(rewards).shape
        return cls(
            obs=np.zeros((e, t, 5, 5, 3), dtype=np.int8),
            actions=np.zeros((e, t), dtype=np.int64),
            logp=np.zeros((e, t)),
            rewards=np.asarray(rewards, float),
            values=np.asarray(values, float),
            dones=np.asarray(dones, bool),
            bootstrap=np.asarray(bootstrap, float),
        )


def collect_rollout(
    slots: list[EnvSlot],
    nets: list[ActorCriticNet],
    n_steps: int,
    action_rng: np.random.Generator,
    value_idx: int = 0,
) -> RolloutBuffer:
    """Sample n_steps from every slot with the score-averaged policy.

    Behavior log-probs come from the averaged distribution; value estimates
    (including the truncation bootstrap) come from ``nets[value_idx]``.
    Finished episodes auto-reset from the slot's pool.
    """
    n_envs = len(slots)
    buf = RolloutBuffer(
        obs=np.zeros((n_envs, n_steps, 5, 5, 3), dtype=np.int8),
        actions=np.zeros((n_envs, n_steps), dtype=np.int64),
        logp=np.zeros((n_envs, n_steps)),
        rewards=np.zeros((n_envs, n_steps)),
        values=np.zeros((n_envs, n_steps)),
        dones=np.zeros((n_envs, n_steps), dtype=bool),
        bootstrap=np.zeros(n_envs),
    )
    obs_now = np.stack([gridworld.encode_observation(s.env) for s in slots])
    for t in range(n_steps):
        x = nets[value_idx].embed(obs_now)
        total = None
        for i, net in enumerate(nets):
            s, v = net.forward_batch(x)
            total = s if total is None else total + s
            if i == value_idx:
                values = v
        scores = total / len(nets)
        probs = softmax(scores)
        u = action_rng.random(n_envs)
        actions = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), 6)
        logp = log_softmax(scores)[np.arange(n_envs), actions]

        buf.obs[:, t] = obs_now
        buf.actions[:, t] = actions
        buf.logp[:, t] = logp
        buf.values[:, t] = values
        for i, slot in enumerate(slots):
            ob, reward, done = gridworld.step(slot.env, int(actions[i]))
            buf.rewards[i, t] = reward
            buf.dones[i, t] = done
            slot.ep_return += reward
            slot.ep_len += 1
            if done:
                buf.episode_returns.append(slot.ep_return)
                slot.reset()
                ob = gridworld.encode_observation(slot.env)
            obs_now[i] = ob

    x = nets[value_idx].embed(obs_now)
    _, buf.bootstrap = nets[value_idx].forward_batch(x)
    return buf


def compute_gae(buf: RolloutBuffer, gamma: float, lam: float):
    """Generalized advantage estimation; returns raw (advantages, returns).

    delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t, accumulated with
    gamma * lambda; returns are advantages + values. Normalization happens
    per update minibatch, not here.
    """
    e, t_max = buf.rewards.shape
    adv = np.zeros((e, t_max))
    next_value = buf.bootstrap
    running = np.zeros(e)
    for t in range(t_max - 1, -1, -1):
        live = 1.0 - buf.dones[:, t]
        delta = buf.rewards[:, t] + gamma * next_value * live - buf.values[:, t]
        running = delta + gamma * lam * live * running
        adv[:, t] = running
        next_value = buf.values[:, t]
    return adv, adv + buf.values


def _minibatch_step(nets, train_idx, adam, x, actions, old_logp, adv, returns, cfg: PpoConfig):
    """One clipped-surrogate PPO step on minibatch data; trains one net."""
    n = x.shape[0]
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    frozen = None
    for i, net in enumerate(nets):
        if i == train_idx:
            continue
        s, _ = net.forward_batch(x)
        frozen = s if frozen is None else frozen + s
    scores_d, values, cache = nets[train_idx].forward_cached(x)
    scores = scores_d if frozen is None else (frozen + scores_d)
    scores = scores / len(nets)

    logp_all = log_softmax(scores)
    probs = softmax(scores)
    logp = logp_all[np.arange(n), actions]
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range)
    surr1 = ratio * adv
    surr2 = clipped * adv
    take_raw = surr1 <= surr2
    policy_loss = -float(np.minimum(surr1, surr2).mean())
    entropy_each = -(probs * logp_all).sum(axis=1)
    entropy = float(entropy_each.mean())
    value_loss = float(((values - returns) ** 2).mean())
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    if not np.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss (policy {policy_loss}, value {value_loss}, entropy {entropy})"
        )

    # d(policy surrogate)/d(scores): grad flows only where the raw term is taken
    dlogp = -(adv * ratio * take_raw) / n
    hot = np.zeros_like(scores)
    hot[np.arange(n), actions] = 1.0
    dscores = dlogp[:, None] * (hot - probs)
    # entropy bonus: dH/ds_k = -p_k (log p_k + H)
    dscores += (cfg.entropy_coef / n) * probs * (logp_all + entropy_each[:, None])
    dscores /= len(nets)
    dvalues = cfg.value_coef * 2.0 * (values - returns) / n

    grads = nets[train_idx].backward(cache, dscores, dvalues)
    clip_grads_(grads, cfg.max_grad_norm)
    adam_step(nets[train_idx].params, grads, adam, cfg.lr)
    return {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float(np.mean(~take_raw)),
    }


def ppo_update(
    nets: list[ActorCriticNet],
    train_idx: int,
    buf: RolloutBuffer,
    cfg: PpoConfig,
    shuffle_rng: np.random.Generator,
    adam: AdamState,
) -> dict:
    """Epochs x shuffled minibatches of one rollout; updates nets[train_idx]."""
    n = buf.total_steps
    x_all = nets[train_idx].embed(buf.obs.reshape(n, 5, 5, 3))
    actions = buf.actions.reshape(n)
    old_logp = buf.logp.reshape(n)
    adv, returns = compute_gae(buf, cfg.gamma, cfg.gae_lambda)
    adv = adv.reshape(n)
    returns = returns.reshape(n)

    stats: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            st = _minibatch_step(
                nets, train_idx, adam, x_all[idx], actions[idx],
                old_logp[idx], adv[idx], returns[idx], cfg,
            )
            for k, v in st.items():
                stats[k] = stats.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in stats.items()}


def _train_best_response(domain_pools, cfg: PpoConfig, master_seed: int,
                         n_envs_each: int, inner_rounds: int, progress=None):
    n_d = len(domain_pools)
    nets = [
        ActorCriticNet(derive_seed(master_seed, "net", d), cfg.embedding)
        for d in range(n_d)
    ]
    adams = [AdamState(nets[d].params) for d in range(n_d)]
    slot_lists = [
        make_slots(domain_pools[d], master_seed, d, n_envs_each) for d in range(n_d)
    ]
    action_rngs = [make_rng(derive_seed(master_seed, "actions", d)) for d in range(n_d)]
    shuffle_rngs = [make_rng(derive_seed(master_seed, "shuffle", d)) for d in range(n_d)]

    curves = []
    steps = 0
    while steps < cfg.total_steps:
        for _ in range(inner_rounds):
            for d in range(n_d):
                buf = collect_rollout(
                    slot_lists[d], nets, cfg.n_steps, action_rngs[d], value_idx=d
                )
                stats = ppo_update(nets, d, buf, cfg, shuffle_rngs[d], adams[d])
                steps += buf.total_steps
                record = {
                    "step": steps,
                    "domain": d,
                    "mean_episode_reward": buf.mean_episode_reward(),
                    "episodes": len(buf.episode_returns),
                    **stats,
                }
                curves.append(record)
                if progress is not None:
                    progress(record)
    return nets, curves


def train_ppo(env_pool, cfg: PpoConfig = PpoConfig(), master_seed: int = 0, progress=None):
    """Pooled PPO baseline: one net, environments drawn from every domain.

    Returns (ActorCriticNet, curve records).
    """
    nets, curves = _train_best_response(
        [env_pool], cfg, master_seed, cfg.n_envs, inner_rounds=1, progress=progress
    )
    return nets[0], curves


def train_ipo(domain_pools, cfg: PpoConfig = PpoConfig(lr=5e-4), master_seed: int = 0,
              inner_rounds: int = 1, progress=None):
    """Best-response training with one net per domain and score averaging.

    Returns (PolicyEnsemble, curve records). With a single domain pool this
    is exactly ``train_ppo`` at the same config (average of one net).
    """
    nets, curves = _train_best_response(
        domain_pools, cfg, master_seed, cfg.n_envs_per_domain, inner_rounds, progress
    )
    return PolicyEnsemble(nets), curves


def policy_nets(policy) -> list[ActorCriticNet]:
    return policy.nets if isinstance(policy, PolicyEnsemble) else [policy]


def evaluate(policy, eval_envs, n_episodes: int | None = None, seed: int = 0) -> float:
    """Mean episode reward over fresh copies of the eval envs.

    Actions are sampled (matching training-time stochasticity) with a fixed
    eval stream, so repeated calls give identical means.
    """
    nets = policy_nets(policy)
    rng = make_rng(derive_seed(seed, "eval-actions"))
    if n_episodes is None:
        n_episodes = len(eval_envs)
    total = 0.0
    for i in range(n_episodes):
        env = gridworld.clone(eval_envs[i % len(eval_envs)])
        while not env.done:
            x = nets[0].embed(gridworld.encode_observation(env)[None])
            probs = softmax(mean_scores_batch(nets, x)[0])
            action = min(int((probs.cumsum() < rng.random()).sum()), 6)
            _, reward, _ = gridworld.step(env, action)
            total += reward
    return total / n_episodes

"""Independent oracles for the test suite and ``ipo selftest``.

Everything here recomputes a quantity by a deliberately different route
than the implementation it checks: truncated series instead of Smith
doubling, simulated rollouts instead of Lyapunov traces, central finite
differences instead of analytic gradients, breadth-first search instead of
the layout generator's by-construction argument.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from . import gridworld, lqr_distractor
from .seeding import make_rng


def lyapunov_series(acl: np.ndarray, qeff: np.ndarray, terms: int = 300) -> np.ndarray:
    """Truncated sum_{t<=terms} (Acl^T)^t Qeff Acl^t."""
    p = qeff.copy()
    m = qeff
    for _ in range(terms):
        m = acl.T @ m @ acl
        p = p + m
    return p


def mc_lqr_cost(
    problem,
    domain,
    k: np.ndarray,
    n_rollouts: int = 100,
    horizon: int = 500,
    seed: int = 0,
    gamma: float = 1.0,
) -> float:
    """Simulated quadratic cost: explicit states, actions, and observations."""
    w = lqr_distractor.observation_map(problem, domain)
    rng = make_rng(seed)
    disc = gamma ** np.arange(horizon)
    total = 0.0
    for _ in range(n_rollouts):
        s = rng.standard_normal(problem.n_s)
        c = 0.0
        for t in range(horizon):
            a = k @ (w @ s)
            c += disc[t] * (s @ problem.Q @ s + a @ problem.R @ a)
            s = problem.A @ s + problem.B @ a
        total += c
    return total / n_rollouts


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Elementwise central finite differences of a scalar function."""
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        e = np.zeros_like(x, dtype=float)
        e[idx] = step
        g[idx] = (f(x + e) - f(x - e)) / (2.0 * step)
        it.iternext()
    return g


def fd_param_gradients(loss_fn, params: dict, step: float = 1e-4) -> dict:
    """Central finite differences of ``loss_fn()`` w.r.t. every param entry.

    ``loss_fn`` must read the (mutated in place) ``params`` dict.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            hi = loss_fn()
            arr[idx] = orig - step
            lo = loss_fn()
            arr[idx] = orig
            g[idx] = (hi - lo) / (2.0 * step)
            it.iternext()
        grads[name] = g
    return grads


def discounted_returns(rewards: np.ndarray, dones: np.ndarray, bootstrap: np.ndarray, gamma: float) -> np.ndarray:
    """Backward discounted-return recursion (the lambda = 1 GAE target)."""
    rewards = np.asarray(rewards, float)
    out = np.zeros_like(rewards)
    nxt = np.asarray(bootstrap, float)
    for t in range(rewards.shape[-1] - 1, -1, -1):
        nxt = rewards[..., t] + gamma * nxt * (1.0 - dones[..., t])
        out[..., t] = nxt
    return out


def _search_signature(env) -> tuple:
    keys = tuple(map(tuple, np.argwhere(env.types == gridworld.TYPE_KEY)))
    doors = tuple(
        (x, y, int(env.states[x, y]))
        for x, y in np.argwhere(env.types == gridworld.TYPE_DOOR)
    )
    return env.agent_pos, env.agent_dir, env.carrying, keys, doors


def bfs_shortest_solution(env, max_states: int = 200_000):
    """Shortest goal-reaching action sequence via BFS over the full MDP.

    Expands every action through the real ``step`` dynamics; returns None
    when the goal is unreachable.
    """
    start = gridworld.clone(env)
    start.t = 0
    start.done = False
    seen = {_search_signature(start)}
    queue = deque([(start, [])])
    while queue:
        if len(seen) > max_states:
            raise RuntimeError("state budget exceeded")
        node, path = queue.popleft()
        for action in gridworld.Action:
            child = gridworld.clone(node)
            child.t = 0  # reachability search; the horizon is irrelevant
            _, reward, done = gridworld.step(child, action)
            if done:
                if reward > 0.0:
                    return path + [int(action)]
                continue
            sig = _search_signature(child)
            if sig not in seen:
                seen.add(sig)
                queue.append((child, path + [int(action)]))
    return None


# -- selftest ----------------------------------------------------------------


def _check_lyapunov_series():
    from . import numlin
    a = 0.8 * numlin.sample_orthogonal(5, 11)
    q = np.eye(5)
    p = numlin.solve_discrete_lyapunov(a, q)
    return float(np.abs(p - lyapunov_series(a, q)).max()) <= 1e-8


def _check_dare_scalar():
    from . import numlin
    p, k = numlin.solve_dare(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    return abs(p[0, 0] - golden) <= 1e-9


def _check_lqr_gradient():
    problem = lqr_distractor.make_problem(4, 4, 3)
    domain = lqr_distractor.make_domain(problem, 6, 5)
    k = lqr_distractor.init_stabilizing(problem, 6)
    k = k + 0.05 * make_rng(9).standard_normal(k.shape)
    g = lqr_distractor.cost_gradient(problem, domain, k)
    fd = central_difference(lambda m: lqr_distractor.cost(problem, domain, m), k)
    return float(np.abs(g - fd).max() / np.abs(fd).max()) <= 1e-5


def _check_mc_cost():
    problem = lqr_distractor.make_problem(5, 5, 21)
    domain = lqr_distractor.make_domain(problem, 8, 22)
    k = lqr_distractor.init_stabilizing(problem, 8)
    exact = lqr_distractor.cost(problem, domain, k)
    sim = mc_lqr_cost(problem, domain, k, seed=4)
    return abs(sim - exact) / exact <= 0.02


def _check_gae_hand_case():
    from .rl_train import compute_gae, RolloutBuffer
    buf = RolloutBuffer.from_arrays(
        rewards=np.array([[0.0, 0.0, 1.0]]),
        values=np.zeros((1, 3)),
        dones=np.array([[False, False, True]]),
        bootstrap=np.zeros(1),
    )
    adv, _ = compute_gae(buf, 0.99, 0.95)
    return np.allclose(adv, [[0.88454025, 0.9405, 1.0]], atol=1e-12)


def _check_bfs_solvable():
    for seed in range(12):
        env = gridworld.generate_env(gridworld.COLOR_RED, seed)
        if bfs_shortest_solution(env) is None:
            return False
    return True


def _check_nn_gradient():
    from .policy_nn import ActorCriticNet, one_hot_observations
    net = ActorCriticNet(1)
    env = gridworld.generate_env(gridworld.COLOR_GREEN, 2)
    x = one_hot_observations(gridworld.encode_observation(env)[None])

    def loss():
        s, v, _ = net.forward_cached(x, need_cache=False)
        return float((s ** 2).sum() + (v ** 2).sum())

    scores, values, cache = net.forward_cached(x)
    grads = net.backward(cache, 2.0 * scores, 2.0 * values)
    sub = {"actor_w": net.params["actor_w"], "conv2_b": net.params["conv2_b"]}
    fd = fd_param_gradients(loss, sub)
    return all(np.abs(grads[k] - fd[k]).max() <= 1e-4 * max(1.0, np.abs(fd[k]).max()) for k in sub)


SELFTEST_CHECKS = [
    ("lyapunov-vs-truncated-series", _check_lyapunov_series),
    ("dare-scalar-golden-ratio", _check_dare_scalar),
    ("lqr-gradient-vs-finite-differences", _check_lqr_gradient),
    ("lyapunov-cost-vs-simulation", _check_mc_cost),
    ("gae-hand-recursion", _check_gae_hand_case),
    ("gridworld-bfs-solvability", _check_bfs_solvable),
    ("net-backward-vs-finite-differences", _check_nn_gradient),
]


def run_selftest(verbose: bool = True) -> bool:
    """Run every registered oracle check; prints one PASS/FAIL line each."""
    ok = True
    for name, check in SELFTEST_CHECKS:
        try:
            passed = check()
        except Exception as exc:  # a crashed oracle is a failure, not an abort
            passed = False
            if verbose:
                print(f"FAIL {name} ({type(exc).__name__}: {exc})")
            ok = False
            continue
        ok = ok and passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'} {name}")
    return ok

"""LQR benchmark with per-domain distractor observations.

The plant is s' = A s + B a with infinite-horizon quadratic cost. The agent
only sees o = [Wc; Wd] s: the top block is a shared full-information map,
the bottom block a high-dimensional per-domain distractor. Policies act as
a = K o. With the initial state drawn from N(0, I) the expected cost of a
stabilizing policy is trace(P) for the discrete Lyapunov solution P, and
the exact cost gradient in K is available in closed form, so training needs
no sampling.

Four trainers are provided: Adam on K over the summed domain costs, the
same over a two-layer factorization K = K1 K2, and a best-response scheme
where each domain owns a policy K^d and plays against the average
(1/n_d) sum_i K^i, optionally composed with a shared linear map phi that is
itself updated. All trainers reject steps that destabilize any training
domain or increase their own objective, halving the step up to a retry
budget.

Benchmark protocol: trainers optimize a discounted cost (default
gamma = 0.95, implemented by scaling A and B by sqrt(gamma)) starting from
the zero gain. The discount makes every bounded gain admissible, so
training can start uninformed — with an undiscounted objective the only
finite-cost starting points already single out the informative block,
which erases the train/test gap this benchmark exists to measure. Under
the discount the full-state optimum of the 20-dim orthogonal-A plant costs
32.07 (the undiscounted one costs 32.36). Set ``gamma=1.0`` and
``init="stabilizing"`` for the undiscounted variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import numlin
from .numlin import NonConvergentError, UnstableError  # re-exported for callers
from .policy_nn import AdamState
from .seeding import derive_seed, make_rng

__all__ = [
    "LqrProblem", "LqrDomain", "LinearPolicy", "FactoredPolicy", "IpoLqrPolicy",
    "OptConfig", "make_problem", "make_domain", "observation_map", "cost",
    "cost_gradient", "init_stabilizing", "train_gd", "train_overparam",
    "train_ipo_lqr", "oracle_cost", "evaluate_transfer", "effective_gain",
    "StabilityLostError", "UnstableError", "NonConvergentError",
]


class StabilityLostError(RuntimeError):
    """Backtracking could not find a step keeping every domain stable."""


@dataclass(frozen=True)
class LqrProblem:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Wc: np.ndarray
    n_s: int
    n_a: int


@dataclass(frozen=True)
class LqrDomain:
    id: str
    Wd: np.ndarray  # (n_y, n_s), orthonormal columns (empty when n_y == 0)
    n_y: int


@dataclass
class LinearPolicy:
    K: np.ndarray


@dataclass
class FactoredPolicy:
    K1: np.ndarray
    K2: np.ndarray

    @property
    def K(self) -> np.ndarray:
        return self.K1 @ self.K2


@dataclass
class IpoLqrPolicy:
    per_domain: list          # one gain per training domain, equal shapes
    phi: np.ndarray | None = None  # shared linear map; None means identity

    @property
    def K(self) -> np.ndarray:
        avg = sum(self.per_domain) / len(self.per_domain)
        return avg if self.phi is None else avg @ self.phi


@dataclass(frozen=True)
class OptConfig:
    lr: float = 1e-3
    max_iters: int = 5000
    conv_tol: float = 1e-7      # relative combined-cost change ...
    conv_window: int = 50       # ... over this many iterations
    backtrack_max: int = 20     # step halvings before giving up
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    inner_rounds: int = 1       # best-response rounds per outer iteration
    gamma: float = 0.95         # training/evaluation discount (1.0 = undiscounted)
    init: str = "zero"          # "zero" | "stabilizing"
    init_seed: int = 0          # stream for the factored trainer's random K1


def make_problem(n_s: int, n_a: int, seed: int) -> LqrProblem:
    """Random plant: Haar-orthogonal A and Wc, identity B, Q, R."""
    if n_s < 1 or n_a < 1:
        raise ValueError("n_s and n_a must be positive")
    return LqrProblem(
        A=numlin.sample_orthogonal(n_s, derive_seed(seed, "A")),
        B=np.eye(n_s, n_a),
        Q=np.eye(n_s),
        R=np.eye(n_a),
        Wc=numlin.sample_orthogonal(n_s, derive_seed(seed, "Wc")),
        n_s=n_s,
        n_a=n_a,
    )


def make_domain(problem: LqrProblem, n_y: int, seed: int) -> LqrDomain:
    """Domain = a fresh semi-orthogonal distractor map of height n_y.

    n_y = 0 is the full-information special case (empty distractor block);
    otherwise n_y >= n_s so the map can have orthonormal columns.
    """
    if n_y == 0:
        return LqrDomain(id=f"{seed:016x}", Wd=np.zeros((0, problem.n_s)), n_y=0)
    if n_y < problem.n_s:
        raise ValueError(f"n_y must be 0 or >= n_s={problem.n_s}, got {n_y}")
    wd = numlin.sample_semi_orthogonal(n_y, problem.n_s, derive_seed(seed, "Wd"))
    return LqrDomain(id=f"{seed:016x}", Wd=wd, n_y=n_y)


def observation_map(problem: LqrProblem, domain: LqrDomain) -> np.ndarray:
    """Stacked map W = [Wc; Wd] from state to observation."""
    return np.vstack((problem.Wc, domain.Wd))


def discounted(problem: LqrProblem, gamma: float) -> LqrProblem:
    """Plant whose undiscounted cost equals the gamma-discounted original."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    if gamma == 1.0:
        return problem
    s = math.sqrt(gamma)
    return replace(problem, A=s * problem.A, B=s * problem.B)


def _eval_k(problem: LqrProblem, w: np.ndarray, k: np.ndarray, need_grad: bool):
    """Cost (and gradient in K) for one domain given its stacked map w."""
    kw = k @ w
    acl = problem.A + problem.B @ kw
    qeff = problem.Q + kw.T @ problem.R @ kw
    p = numlin.solve_discrete_lyapunov(acl, qeff)  # raises UnstableError
    c = float(np.trace(p))
    if not need_grad:
        return c, None
    sigma = numlin.solve_discrete_lyapunov(acl.T, np.eye(problem.n_s))
    grad = 2.0 * (problem.R @ kw + problem.B.T @ p @ acl) @ sigma @ w.T
    return c, grad


def cost(problem: LqrProblem, domain: LqrDomain, K: np.ndarray, gamma: float = 1.0) -> float:
    """Expected infinite-horizon cost trace(P) of the output-feedback gain K."""
    prob = discounted(problem, gamma)
    c, _ = _eval_k(prob, observation_map(prob, domain), np.asarray(K, float), False)
    return c


def cost_gradient(
    problem: LqrProblem, domain: LqrDomain, K: np.ndarray, gamma: float = 1.0
) -> np.ndarray:
    """Exact gradient of ``cost`` in K: 2 (R K W + B^T P Acl) Sigma W^T.

    P solves the cost Lyapunov equation and Sigma the state-covariance one
    (Sigma = I + Acl Sigma Acl^T).
    """
    prob = discounted(problem, gamma)
    _, g = _eval_k(prob, observation_map(prob, domain), np.asarray(K, float), True)
    return g


def init_stabilizing(problem: LqrProblem, n_y: int) -> np.ndarray:
    """Gain [-(1/2) A Wc^T | 0]: closed loop exactly 0.5 A, distractors ignored."""
    if problem.B.shape != (problem.n_s, problem.n_a) or not np.array_equal(
        problem.B, np.eye(problem.n_s, problem.n_a)
    ):
        raise ValueError("stabilizing init assumes B = I")
    return np.hstack((-0.5 * problem.A @ problem.Wc.T, np.zeros((problem.n_a, n_y))))


def oracle_cost(problem: LqrProblem, gamma: float = 1.0) -> float:
    """Full-state-feedback optimum trace(P) from the Riccati solution."""
    prob = discounted(problem, gamma)
    p, _ = numlin.solve_dare(prob.A, prob.B, prob.Q, prob.R)
    return float(np.trace(p))


def effective_gain(policy) -> np.ndarray:
    """The single linear map a = K o that a trained policy implements."""
    if isinstance(policy, (LinearPolicy, FactoredPolicy, IpoLqrPolicy)):
        return policy.K
    return np.asarray(policy, float)


def evaluate_transfer(
    policy, problem: LqrProblem, test_domain: LqrDomain, gamma: float = 1.0
) -> float:
    """Cost of the effective gain on a held-out domain; inf when unstable."""
    try:
        return cost(problem, test_domain, effective_gain(policy), gamma)
    except UnstableError:
        return math.inf


# -- trainers ----------------------------------------------------------------


@dataclass
class _DomainSet:
    """Training-side view of the domains: discounted plant plus stacked maps."""

    problem: LqrProblem
    maps: list

    @classmethod
    def build(cls, problem, domains, gamma):
        if not domains:
            raise ValueError("need at least one training domain")
        if len({d.n_y for d in domains}) != 1:
            raise ValueError("training domains must share the distractor dimension")
        prob = discounted(problem, gamma)
        return cls(prob, [observation_map(prob, d) for d in domains])

    @property
    def n_y(self) -> int:
        return self.maps[0].shape[0] - self.problem.n_s

    def costs(self, k: np.ndarray) -> list[float]:
        return [_eval_k(self.problem, w, k, False)[0] for w in self.maps]

    def cost_one(self, d: int, k: np.ndarray) -> float:
        return _eval_k(self.problem, self.maps[d], k, False)[0]

    def grad_one(self, d: int, k: np.ndarray) -> np.ndarray:
        return _eval_k(self.problem, self.maps[d], k, True)[1]

    def all_stable(self, k: np.ndarray) -> bool:
        for w in self.maps:
            acl = self.problem.A + self.problem.B @ (k @ w)
            if numlin.spectral_radius(acl) >= 1.0 - numlin.TOL.stability_margin:
                return False
        return True


def _initial_gain(problem: LqrProblem, n_y: int, opts: OptConfig) -> np.ndarray:
    if opts.init == "zero":
        return np.zeros((problem.n_a, problem.n_s + n_y))
    if opts.init == "stabilizing":
        return init_stabilizing(problem, n_y)
    raise ValueError(f"unknown init {opts.init!r}")


def _record(history, iteration, per_domain):
    history.append({
        "iteration": iteration,
        "per_domain": [float(c) for c in per_domain],
        "mean_cost": float(np.mean(per_domain)),
    })


def _converged(totals, opts: OptConfig) -> bool:
    if len(totals) <= opts.conv_window:
        return False
    old, new = totals[-1 - opts.conv_window], totals[-1]
    return abs(new - old) < opts.conv_tol * max(abs(old), 1e-30)


def _descend(dset: _DomainSet, assemble, params: dict, opts: OptConfig):
    """Adam descent on the summed domain costs of K = assemble(params).

    A step is accepted only if every training domain stays stable and the
    combined cost does not increase; otherwise the step is halved up to
    ``opts.backtrack_max`` times and skipped entirely if only the cost test
    keeps failing. ``StabilityLostError`` means even the smallest step was
    unstable somewhere.
    """
    adam = AdamState(params, opts.beta1, opts.beta2, opts.eps)
    costs = dset.costs(assemble(params))
    total = sum(costs)
    history: list[dict] = []
    totals: list[float] = [total]
    _record(history, 0, costs)

    for it in range(1, opts.max_iters + 1):
        k_now = assemble(params)
        grad_eff = None
        for d in range(len(dset.maps)):
            g = dset.grad_one(d, k_now)
            grad_eff = g if grad_eff is None else grad_eff + g
        grads = _chain(params, grad_eff)
        update = adam.update(grads, opts.lr)

        accepted = False
        unstable_at_floor = False
        for j in range(opts.backtrack_max + 1):
            scale = 0.5 ** j
            cand = {k: params[k] + scale * update[k] for k in params}
            try:
                cand_costs = dset.costs(assemble(cand))
            except UnstableError:
                unstable_at_floor = j == opts.backtrack_max
                continue
            if sum(cand_costs) <= total:
                params, costs, total = cand, cand_costs, sum(cand_costs)
                accepted = True
                break
        if not accepted and unstable_at_floor:
            raise StabilityLostError(f"no stable step found at iteration {it}")

        totals.append(total)
        _record(history, it, costs)
        if _converged(totals, opts):
            break
    return params, history


def _chain(params: dict, grad_eff: np.ndarray) -> dict:
    """Gradients of the summed cost w.r.t. the raw parameters."""
    if set(params) == {"K"}:
        return {"K": grad_eff}
    k1, k2 = params["K1"], params["K2"]
    return {"K1": grad_eff @ k2.T, "K2": k1.T @ grad_eff}


def train_gd(problem: LqrProblem, domains: list[LqrDomain], opts: OptConfig = OptConfig()):
    """Adam on a single gain K over the summed training-domain costs.

    Returns (LinearPolicy, history); history rows carry per-domain and mean
    cost per accepted iteration.
    """
    dset = _DomainSet.build(problem, domains, opts.gamma)
    params = {"K": _initial_gain(problem, dset.n_y, opts)}
    params, history = _descend(dset, lambda p: p["K"], params, opts)
    return LinearPolicy(params["K"]), history


def train_overparam(problem: LqrProblem, domains: list[LqrDomain], opts: OptConfig = OptConfig()):
    """Adam over the two-layer factorization K = K1 K2, hidden width 10 n_a.

    Zero protocol: K1 is a dense random 1/sqrt(h)-scaled Gaussian (seeded by
    ``opts.init_seed``) and K2 = 0, so the product starts at the zero gain
    with every hidden unit live. Stabilizing protocol: identity-padded
    lifting, so K1 K2 equals the stabilizing gain exactly.
    """
    dset = _DomainSet.build(problem, domains, opts.gamma)
    h = 10 * problem.n_a
    k0 = _initial_gain(problem, dset.n_y, opts)
    if opts.init == "zero":
        g = make_rng(derive_seed(opts.init_seed, "overparam-K1"))
        params = {
            "K1": g.standard_normal((problem.n_a, h)) / math.sqrt(h),
            "K2": np.zeros((h, problem.n_s + dset.n_y)),
        }
    else:
        params = {"K1": np.eye(problem.n_a, h), "K2": np.eye(h, problem.n_a) @ k0}
    params, history = _descend(dset, lambda p: p["K1"] @ p["K2"], params, opts)
    return FactoredPolicy(params["K1"], params["K2"]), history


def train_ipo_lqr(
    problem: LqrProblem,
    domains: list[LqrDomain],
    fixed_phi: bool = True,
    opts: OptConfig = OptConfig(),
):
    """Best-response training: one gain per domain, played through the average.

    Per outer iteration (variable-phi first takes one Adam step on the
    shared map phi against the summed costs), every player d takes one Adam
    step on K^d against its own domain's cost of the averaged policy. All
    player gradients within a round are evaluated at the round-start
    average, so identical domains with identical inits stay identical.
    Steps are backtracked exactly like ``train_gd``: every domain must stay
    stable and the step's own objective must not increase.
    """
    dset = _DomainSet.build(problem, domains, opts.gamma)
    n_d = len(domains)
    k0 = _initial_gain(problem, dset.n_y, opts)
    if fixed_phi:
        phi = None
        players = [k0.copy() for _ in range(n_d)]
    else:
        h = 10 * problem.n_a
        phi = np.eye(h, problem.n_s + dset.n_y)
        players = [k0 @ phi.T for _ in range(n_d)]
        phi_adam = AdamState({"phi": phi}, opts.beta1, opts.beta2, opts.eps)
    adams = [AdamState({"K": players[d]}, opts.beta1, opts.beta2, opts.eps) for d in range(n_d)]

    def effective(ks, ph):
        avg = sum(ks) / n_d
        return avg if ph is None else avg @ ph

    history: list[dict] = []
    costs = dset.costs(effective(players, phi))
    totals = [sum(costs)]
    _record(history, 0, costs)

    for it in range(1, opts.max_iters + 1):
        if phi is not None:
            avg = sum(players) / n_d
            grad_eff = None
            for d in range(n_d):
                g = dset.grad_one(d, avg @ phi)
                grad_eff = g if grad_eff is None else grad_eff + g
            update = phi_adam.update({"phi": avg.T @ grad_eff}, opts.lr)
            base = sum(dset.costs(avg @ phi))
            for j in range(opts.backtrack_max + 1):
                cand = phi + 0.5 ** j * update["phi"]
                try:
                    cand_costs = dset.costs(avg @ cand)
                except UnstableError:
                    continue
                if sum(cand_costs) <= base:
                    phi = cand
                    break

        for _ in range(opts.inner_rounds):
            k_eff = effective(players, phi)
            round_grads = []
            for d in range(n_d):
                g = dset.grad_one(d, k_eff) / n_d
                round_grads.append(g if phi is None else g @ phi.T)
            for d in range(n_d):
                update = adams[d].update({"K": round_grads[d]}, opts.lr)
                base = dset.cost_one(d, effective(players, phi))
                accepted = False
                unstable_at_floor = False
                for j in range(opts.backtrack_max + 1):
                    cand = players[d] + 0.5 ** j * update["K"]
                    trial = players[:d] + [cand] + players[d + 1 :]
                    k_trial = effective(trial, phi)
                    if not dset.all_stable(k_trial):
                        unstable_at_floor = j == opts.backtrack_max
                        continue
                    if dset.cost_one(d, k_trial) <= base:
                        players[d] = cand
                        accepted = True
                        break
                if not accepted and unstable_at_floor:
                    raise StabilityLostError(
                        f"player {d} found no stable step at iteration {it}"
                    )

        costs = dset.costs(effective(players, phi))
        totals.append(sum(costs))
        _record(history, it, costs)
        if _converged(totals, opts):
            break

    return IpoLqrPolicy(per_domain=players, phi=phi), history

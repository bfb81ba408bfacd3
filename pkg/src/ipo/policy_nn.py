"""Actor-critic network with exact reverse-mode gradients.

The architecture is fixed: three 2x2 convolutions (16, 32, 64 channels,
ReLU after each, a 2x2 stride-1 max-pool after the first) over a 5x5x15
one-hot embedding of the grid observation, then affine actor (7 scores)
and critic (1 value) heads. Because the graph never changes, the backward
pass is written out by hand instead of pulling in a general autodiff
framework; a finite-difference suite pins it down.

Per-domain policies are combined IPO-style: mean of the raw score vectors
followed by a softmax (discrete), or elementwise means of both the means
and the standard deviations (diagonal Gaussians).

Parameters live in plain ``dict[str, ndarray]`` maps; gradients are
returned as a dict of the same shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .seeding import make_rng

N_ACTIONS = 7
N_TYPES = 6      # distinct object-type codes (0,1,2,4,5,8)
N_COLORS = 6
N_STATES = 3
N_PLANES = N_TYPES + N_COLORS + N_STATES

# object-type code -> one-hot plane (codes 3, 6, 7 are reserved/unused)
_TYPE_PLANE = np.full(9, -1, dtype=np.int64)
for _plane, _code in enumerate((0, 1, 2, 4, 5, 8)):
    _TYPE_PLANE[_code] = _plane

CHECKPOINT_VERSION = 1


def one_hot_observations(obs: np.ndarray) -> np.ndarray:
    """Embed integer observations (..., 5, 5, 3) as (..., 5, 5, 15) one-hot planes."""
    obs = np.asarray(obs)
    t = _TYPE_PLANE[obs[..., 0]]
    if np.any(t < 0):
        raise ValueError("observation contains a reserved object-type code")
    out = np.empty(obs.shape[:-1] + (N_PLANES,), dtype=float)
    out[..., :N_TYPES] = np.eye(N_TYPES)[t]
    out[..., N_TYPES : N_TYPES + N_COLORS] = np.eye(N_COLORS)[obs[..., 1]]
    out[..., N_TYPES + N_COLORS :] = np.eye(N_STATES)[obs[..., 2]]
    return out


def raw_observations(obs: np.ndarray) -> np.ndarray:
    """Embed integer observations as (..., 5, 5, 3) raw float code planes.

    This is the gridworld benchmark default: codes enter the convolutions
    as magnitudes, so an unseen color is genuinely far from the training
    colors in input space (one-hot would make it just an unused axis,
    which measurably erases the train/test generalization gap the
    benchmark is about).
    """
    return np.asarray(obs, dtype=float).copy()


EMBEDDINGS = {"raw": (raw_observations, 3), "onehot": (one_hot_observations, N_PLANES)}


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    z = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    z = scores - scores.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def orthogonal_init(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    """Orthogonal weight init (rows or columns orthonormal, whichever fits)."""
    rows, cols = shape
    g = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diagonal(r) >= 0.0, 1.0, -1.0)
    if rows < cols:
        q = q.T
    return gain * q


# -- 2x2 convolution / pooling primitives -----------------------------------
#
# Patches are flattened in (dy, dx, channel) order; conv weights are stored
# as (out_channels, 4 * in_channels) so a convolution is one matmul.

def _patches(x: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [x[:, :-1, :-1], x[:, :-1, 1:], x[:, 1:, :-1], x[:, 1:, 1:]], axis=3
    )


def _scatter_patches(dp: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    dx = np.zeros(in_shape)
    c = in_shape[3]
    dx[:, :-1, :-1] += dp[..., :c]
    dx[:, :-1, 1:] += dp[..., c : 2 * c]
    dx[:, 1:, :-1] += dp[..., 2 * c : 3 * c]
    dx[:, 1:, 1:] += dp[..., 3 * c :]
    return dx


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = _patches(x)
    n, h, wd, f = p.shape
    z = p.reshape(n * h * wd, f) @ w.T + b
    return z.reshape(n, h, wd, w.shape[0]), p


def _conv_back(dz, p, w, in_shape):
    n, h, wd, c = dz.shape
    dz2 = dz.reshape(n * h * wd, c)
    p2 = p.reshape(n * h * wd, -1)
    gw = dz2.T @ p2
    gb = dz2.sum(axis=0)
    dx = _scatter_patches((dz2 @ w).reshape(n, h, wd, -1), in_shape)
    return gw, gb, dx


_POOL_SLICES = (
    (slice(None), slice(None, -1), slice(None, -1)),
    (slice(None), slice(None, -1), slice(1, None)),
    (slice(None), slice(1, None), slice(None, -1)),
    (slice(None), slice(1, None), slice(1, None)),
)


def _maxpool(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # 2x2 window, stride 1 (keeps the third conv valid on 5x5 inputs)
    stack = np.stack([x[s] for s in _POOL_SLICES], axis=0)
    idx = stack.argmax(axis=0)
    out = np.take_along_axis(stack, idx[None], axis=0)[0]
    return out, idx


def _maxpool_back(dout, idx, in_shape):
    dx = np.zeros(in_shape)
    for k, s in enumerate(_POOL_SLICES):
        dx[s] += np.where(idx == k, dout, 0.0)
    return dx


class ActorCriticNet:
    """Fixed conv encoder with affine actor and critic heads.

    Hidden layers use orthogonal init with gain sqrt(2); the actor head is
    scaled down to 0.01 so the initial policy is near uniform; the critic
    head uses gain 1. Biases start at zero.
    """

    def __init__(self, seed: int, embedding: str = "raw"):
        self.seed = int(seed)
        if embedding not in EMBEDDINGS:
            raise ValueError(f"unknown embedding {embedding!r}")
        self.embedding = embedding
        self._embed, n_planes = EMBEDDINGS[embedding]
        self.param_shapes = {
            "conv1_w": (16, 4 * n_planes),
            "conv1_b": (16,),
            "conv2_w": (32, 4 * 16),
            "conv2_b": (32,),
            "conv3_w": (64, 4 * 32),
            "conv3_b": (64,),
            "actor_h_w": (64, 64),
            "actor_h_b": (64,),
            "actor_w": (N_ACTIONS, 64),
            "actor_b": (N_ACTIONS,),
            "critic_h_w": (64, 64),
            "critic_h_b": (64,),
            "critic_w": (1, 64),
            "critic_b": (1,),
        }
        rng = make_rng(seed)
        gains = {"conv1_w": np.sqrt(2), "conv2_w": np.sqrt(2), "conv3_w": np.sqrt(2),
                 "actor_h_w": np.sqrt(2), "critic_h_w": np.sqrt(2),
                 "actor_w": 0.01, "critic_w": 1.0}
        self.params: dict[str, np.ndarray] = {}
        for name, shape in self.param_shapes.items():
            if name.endswith("_b"):
                self.params[name] = np.zeros(shape)
            else:
                self.params[name] = orthogonal_init(rng, shape, gains[name])

    def embed(self, obs: np.ndarray) -> np.ndarray:
        """Integer observations (B, 5, 5, 3) to float input planes."""
        return self._embed(obs)

    def forward_batch(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Scores (B, 7) and values (B,) for one-hot inputs (B, 5, 5, 15)."""
        scores, values, _ = self.forward_cached(x, need_cache=False)
        return scores, values

    def forward_cached(self, x: np.ndarray, need_cache: bool = True):
        p = self.params
        z1, p1 = _conv(x, p["conv1_w"], p["conv1_b"])
        a1 = np.maximum(z1, 0.0)
        m1, idx1 = _maxpool(a1)
        z2, p2 = _conv(m1, p["conv2_w"], p["conv2_b"])
        a2 = np.maximum(z2, 0.0)
        z3, p3 = _conv(a2, p["conv3_w"], p["conv3_b"])
        feat = np.maximum(z3, 0.0).reshape(x.shape[0], 64)
        ha = np.tanh(feat @ p["actor_h_w"].T + p["actor_h_b"])
        hc = np.tanh(feat @ p["critic_h_w"].T + p["critic_h_b"])
        scores = ha @ p["actor_w"].T + p["actor_b"]
        values = (hc @ p["critic_w"].T + p["critic_b"]).ravel()
        cache = None
        if need_cache:
            cache = {"p1": p1, "z1": z1, "idx1": idx1, "a1_shape": a1.shape,
                     "m1_shape": m1.shape, "p2": p2, "z2": z2, "p3": p3,
                     "z3": z3, "feat": feat, "ha": ha, "hc": hc}
        return scores, values, cache

    def backward(self, cache, dscores: np.ndarray, dvalues: np.ndarray) -> dict[str, np.ndarray]:
        """Exact parameter gradients for upstream dL/dscores and dL/dvalues."""
        p = self.params
        feat, ha, hc = cache["feat"], cache["ha"], cache["hc"]
        g = {}
        g["actor_w"] = dscores.T @ ha
        g["actor_b"] = dscores.sum(axis=0)
        g["critic_w"] = (dvalues @ hc)[None, :]
        g["critic_b"] = np.array([dvalues.sum()])
        dha = (dscores @ p["actor_w"]) * (1.0 - ha * ha)
        dhc = (dvalues[:, None] @ p["critic_w"]) * (1.0 - hc * hc)
        g["actor_h_w"] = dha.T @ feat
        g["actor_h_b"] = dha.sum(axis=0)
        g["critic_h_w"] = dhc.T @ feat
        g["critic_h_b"] = dhc.sum(axis=0)
        dfeat = dha @ p["actor_h_w"] + dhc @ p["critic_h_w"]

        n = feat.shape[0]
        dz3 = (dfeat * (cache["z3"].reshape(n, 64) > 0.0)).reshape(cache["z3"].shape)
        g["conv3_w"], g["conv3_b"], da2 = _conv_back(
            dz3, cache["p3"], p["conv3_w"], cache["z2"].shape
        )
        dz2 = da2 * (cache["z2"] > 0.0)
        g["conv2_w"], g["conv2_b"], dm1 = _conv_back(
            dz2, cache["p2"], p["conv2_w"], cache["m1_shape"]
        )
        da1 = _maxpool_back(dm1, cache["idx1"], cache["a1_shape"])
        dz1 = da1 * (cache["z1"] > 0.0)
        n1, h1, w1, c1 = dz1.shape
        dz1f = dz1.reshape(n1 * h1 * w1, c1)
        g["conv1_w"] = dz1f.T @ cache["p1"].reshape(n1 * h1 * w1, -1)
        g["conv1_b"] = dz1f.sum(axis=0)
        return g


def forward(net: ActorCriticNet, obs: np.ndarray) -> tuple[np.ndarray, float]:
    """Score vector and value for a single integer observation (5, 5, 3)."""
    scores, values = net.forward_batch(net.embed(np.asarray(obs)[None]))
    return scores[0], float(values[0])


@dataclass
class PolicyEnsemble:
    """One actor-critic per training domain; acts through score averaging."""

    nets: list

    def __post_init__(self):
        if not self.nets:
            raise ValueError("ensemble needs at least one net")
        if len({n.embedding for n in self.nets}) != 1:
            raise ValueError("ensemble nets must share one observation embedding")


@dataclass(frozen=True)
class CategoricalDist:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < 0.0) or abs(p.sum() - 1.0) > 1e-8:
            raise ValueError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    def sample(self, rng: np.random.Generator) -> int:
        return int((self.probs.cumsum() < rng.random()).sum())

    def log_prob(self, action: int) -> float:
        return float(np.log(self.probs[action]))

    def entropy(self) -> float:
        p = self.probs[self.probs > 0.0]
        return float(-(p * np.log(p)).sum())


@dataclass(frozen=True)
class GaussianDist:
    """Diagonal Gaussian over a continuous action vector."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        if mean.shape != std.shape:
            raise ValueError(f"mean/std shape mismatch: {mean.shape} vs {std.shape}")
        if np.any(std <= 0.0):
            raise ValueError("std must be positive elementwise")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def mean_scores_batch(nets: list, x: np.ndarray) -> np.ndarray:
    """Arithmetic mean of per-net score vectors for one-hot inputs."""
    total = None
    for net in nets:
        s, _ = net.forward_batch(x)
        total = s if total is None else total + s
    return total / len(nets)


def average_scores(ensemble, obs: np.ndarray) -> CategoricalDist:
    """IPO discrete averaging: softmax of the mean per-net score vector."""
    nets = ensemble.nets if isinstance(ensemble, PolicyEnsemble) else list(ensemble)
    x = nets[0].embed(np.asarray(obs)[None])
    return CategoricalDist(softmax(mean_scores_batch(nets, x)[0]))


def average_gaussian(dists: list[GaussianDist]) -> GaussianDist:
    """IPO continuous averaging: elementwise means of means and of stds.

    Standard deviations are averaged directly (not variances).
    """
    if not dists:
        raise ValueError("need at least one distribution")
    dim = dists[0].mean.shape
    if any(d.mean.shape != dim for d in dists):
        raise ValueError("all distributions must share the same dimension")
    mean = np.mean([d.mean for d in dists], axis=0)
    std = np.mean([d.std for d in dists], axis=0)
    return GaussianDist(mean, std)


class AdamState:
    """Adam first/second moment estimates for a dict of parameter arrays."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, grads: dict, lr: float) -> dict:
        """Advance the moments and return the (bias-corrected) update step."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, g in grads.items():
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            out[k] = -lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """Apply one Adam update in place; returns the mutated params and state."""
    for k, step in state.update(grads, lr).items():
        params[k] += step
    return params, state


def global_grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_grads_(grads: dict, max_norm: float) -> float:
    """Scale grads in place to a global norm of at most max_norm; returns the raw norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a versioned checkpoint: shape manifest plus raw arrays (npz)."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "names": sorted(params),
        "shapes": {k: list(params[k].shape) for k in sorted(params)},
        "meta": meta or {},
    }
    arrays = {f"p/{k}": v for k, v in params.items()}
    np.savez(path, __manifest__=np.array(json.dumps(manifest)), **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; validates version and the shape manifest."""
    with np.load(path, allow_pickle=False) as data:
        manifest = json.loads(str(data["__manifest__"]))
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['version']}")
        params = {k: data[f"p/{k}"].copy() for k in manifest["names"]}
    for k, shape in manifest["shapes"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"checkpoint shape mismatch for {k}")
    return params, manifest["meta"]

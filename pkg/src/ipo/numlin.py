"""Dense linear-algebra kernels for the LQR benchmark.

Haar-orthogonal sampling, a Smith-doubling discrete Lyapunov solver, a
fixed-point discrete Riccati solver, and the spectral radius. All functions
are pure, operate on plain float64 ndarrays, and are safe to call from many
threads. Numerical tolerances live in one ``Tolerances`` record.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import make_rng


class UnstableError(ValueError):
    """Closed-loop matrix is not Schur stable (spectral radius too close to 1)."""


class NonConvergentError(RuntimeError):
    """An iterative solver failed to meet its tolerance within budget."""


@dataclass(frozen=True)
class Tolerances:
    ortho: float = 1e-10            # max-norm defect of Q^T Q - I for samplers
    spectral: float = 1e-8          # accuracy of spectral_radius
    stability_margin: float = 1e-9  # Lyapunov solves require rho < 1 - margin
    lyap_update: float = 1e-14      # Smith doubling stops below this update norm
    lyap_max_rounds: int = 200
    lyap_residual: float = 1e-10    # fixed-point residual, relative to max|P|
    dare_update: float = 1e-12      # Riccati iteration stops below this update norm
    dare_max_iters: int = 10000
    dare_residual: float = 1e-9     # fixed-point residual, relative to max|P|


TOL = Tolerances()


def _check_square(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    return m


def sample_semi_orthogonal(rows: int, cols: int, seed: int) -> np.ndarray:
    """Sample a rows x cols matrix with orthonormal columns.

    Haar distribution via the QR factorization of an i.i.d. standard-normal
    matrix, with the signs of diag(R) folded into Q to make the factor
    unique. Gaussians come from numpy's ziggurat on the Philox stream, so
    the draw is bit-reproducible per seed.
    """
    if not rows >= cols >= 1:
        raise ValueError(f"need rows >= cols >= 1, got {rows}x{cols}")
    g = make_rng(seed).standard_normal((rows, cols))
    q, r = np.linalg.qr(g)
    return q * np.where(np.diagonal(r) >= 0.0, 1.0, -1.0)


def sample_orthogonal(n: int, seed: int) -> np.ndarray:
    """Sample an n x n Haar-orthogonal matrix."""
    return sample_semi_orthogonal(n, n, seed)


def spectral_radius(m: np.ndarray) -> float:
    """Largest eigenvalue modulus of a square matrix.

    Uses the LAPACK nonsymmetric eigensolver, accurate far beyond the
    1e-8 contract (a restarted power iteration stalls on the unit-modulus
    complex pairs that orthogonal closed loops produce).
    """
    m = _check_square(m, "matrix")
    return float(np.abs(np.linalg.eigvals(m)).max())


def solve_discrete_lyapunov(acl: np.ndarray, qeff: np.ndarray, tol: Tolerances = TOL) -> np.ndarray:
    """Solve P = Qeff + Acl^T P Acl by Smith doubling.

    Each round maps (A, P) <- (A @ A, P + A^T P A), which squares the tail
    of the series sum_t (A^T)^t Qeff A^t; iteration stops once the additive
    update falls below ``tol.lyap_update`` in max norm.

    Raises ``UnstableError`` when rho(Acl) >= 1 - margin and
    ``NonConvergentError`` when the round budget or the fixed-point
    residual bound is violated.
    """
    acl = _check_square(acl, "Acl")
    qeff = _check_square(qeff, "Qeff")
    if np.abs(qeff - qeff.T).max() > 1e-12 * max(np.abs(qeff).max(), 1.0):
        raise ValueError("Qeff must be symmetric")
    rho = spectral_radius(acl)
    if rho >= 1.0 - tol.stability_margin:
        raise UnstableError(f"spectral radius {rho:.12g} >= 1 - {tol.stability_margin:g}")

    p = qeff.copy()
    a = acl.copy()
    for _ in range(tol.lyap_max_rounds):
        update = a.T @ p @ a
        p = p + update
        if np.abs(update).max() < tol.lyap_update:
            break
        a = a @ a
    else:
        raise NonConvergentError(
            f"Smith doubling missed {tol.lyap_update:g} in {tol.lyap_max_rounds} rounds"
        )
    p = 0.5 * (p + p.T)
    resid = np.abs(p - (qeff + acl.T @ p @ acl)).max()
    if resid > tol.lyap_residual * np.abs(p).max() and resid > 0.0:
        raise NonConvergentError(f"Lyapunov residual {resid:g} out of tolerance")
    return p


def solve_dare(
    a: np.ndarray, b: np.ndarray, q: np.ndarray, r: np.ndarray, tol: Tolerances = TOL
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Starting from P0 = Q, iterates
    P <- Q + A^T P A - A^T P B (R + B^T P B)^-1 B^T P A
    until the max-norm update is below ``tol.dare_update``. Returns
    ``(P, Kstar)`` with Kstar = -(R + B^T P B)^-1 B^T P A, so the optimal
    full-state action is ``Kstar @ s``. Divergence (e.g. an unstabilizable
    pair) surfaces as ``NonConvergentError``.
    """
    a = _check_square(a, "A")
    q = _check_square(q, "Q")
    r = _check_square(r, "R")
    b = np.asarray(b, dtype=float)
    if b.shape[0] != a.shape[0] or r.shape[0] != b.shape[1]:
        raise ValueError(f"inconsistent shapes A{a.shape} B{b.shape} R{r.shape}")

    p = q.copy()
    for _ in range(tol.dare_max_iters):
        bp = b.T @ p
        m = bp @ a
        gain = np.linalg.solve(r + bp @ b, m)
        p_next = q + a.T @ p @ a - m.T @ gain
        p_next = 0.5 * (p_next + p_next.T)
        delta = np.abs(p_next - p).max()
        p = p_next
        if not np.isfinite(delta):
            raise NonConvergentError("Riccati iteration diverged")
        if delta < tol.dare_update:
            break
    else:
        raise NonConvergentError(
            f"Riccati iteration missed {tol.dare_update:g} in {tol.dare_max_iters} iters"
        )

    bp = b.T @ p
    kstar = -np.linalg.solve(r + bp @ b, bp @ a)
    resid = np.abs(p - (q + a.T @ p @ a - (bp @ a).T @ (-kstar))).max()
    if resid > tol.dare_residual * np.abs(p).max():
        raise NonConvergentError(f"DARE residual {resid:g} out of tolerance")
    return p, kstar

"""Tracking-mode estimation with dedicated per-user transmit beams.

Each user ``p`` gets its own stream and beam ``f_p``. When the beams isolate
the users in angle, the joint likelihood separates and every user's
parameters come from an independent local search of the single-user GLRT
statistic around its prior.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ObservationModel, UlaArray, effective_channel, steering_vector
from .detector import glrt_statistic, refine_local
from .errors import ConfigurationError


@dataclass
class TrackedUser:
    """User ``index`` with prior ``(nu, tau, phi)``, beam ``f_p`` and symbols ``(B, N, M)``."""

    index: int
    prior: tuple
    beam: np.ndarray
    symbols: np.ndarray


def zero_forcing_beams(arr: UlaArray, angles) -> np.ndarray:
    """Unit-norm beams with ``a(phi_p)^H f_q = 0`` for ``q != p``."""
    A = steering_vector(arr, np.asarray(angles, dtype=float))
    F = A @ np.linalg.inv(A.conj().T @ A)
    return F / np.linalg.norm(F, axis=0)


def check_isolation(users, arr: UlaArray, tol: float = 0.05):
    """Raise if some ``|a^H(phi_p) f_q| / |a^H(phi_p) f_p|`` exceeds ``tol``."""
    for p in users:
        a = steering_vector(arr, p.prior[2])
        own = abs(np.vdot(a, p.beam))
        for q in users:
            if q.index == p.index:
                continue
            ratio = abs(np.vdot(a, q.beam)) / own if own > 0 else np.inf
            if ratio > tol:
                raise ConfigurationError(
                    f"beam of user {q.index} leaks {ratio:.3f} (> {tol}) towards user {p.index}")


def slice_channel(U, f_p, psi_matrix, phi, arr: UlaArray | None = None):
    """Single-user column block ``(U^H a a^H f_p) kron Psi``."""
    return effective_channel(U, np.asarray(f_p).reshape(-1, 1), psi_matrix, phi, arr)


def user_model(cfg, arr, schedule, user: TrackedUser, psi_source=None) -> ObservationModel:
    """Observation model restricted to one user's beam and stream."""
    x = np.asarray(user.symbols)
    x = x.reshape(x.shape[0], 1, cfg.N, cfg.M)
    return ObservationModel(cfg, arr, schedule, np.asarray(user.beam).reshape(-1, 1), x, psi_source)


@dataclass
class CorrelationSystem:
    """``r_p = sum_b x_p^H G_p^H y_b`` and ``A_pq = sum_b x_p^H G_p^H G_q x_q``."""

    r: np.ndarray
    A: np.ndarray


def correlations(models, y, points) -> CorrelationSystem:
    """Assemble ``r`` and ``A`` for users at hypothesised ``points``."""
    S = np.stack([m.signal(*pt).ravel() for m, pt in zip(models, points)])
    y = np.asarray(y).ravel()
    A = S.conj() @ S.T
    A = 0.5 * (A + A.conj().T)
    return CorrelationSystem(S.conj() @ y, A)


def joint_gain_estimate(cs: CorrelationSystem, diagonal: bool = False, rcond: float = 1e-10):
    """``h = A^{-1} r``, or ``r_p / A_pp`` when ``diagonal``.

    Raises
    ------
    ConfigurationError
        When ``A`` is numerically singular; the message names the most
        collinear user pair.
    """
    A, r = cs.A, cs.r
    d = np.real(np.diag(A))
    if np.any(d <= 0):
        raise ConfigurationError(f"user {int(np.argmin(d))} has no signal energy")
    if diagonal:
        return r / d
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= rcond * s[0]:
        C = np.abs(A) / np.sqrt(np.outer(d, d))
        np.fill_diagonal(C, -1)
        p, q = np.unravel_index(int(np.argmax(C)), C.shape)
        raise ConfigurationError(
            f"correlation matrix is singular: users {p} and {q} are collinear (coherence {C[p, q]:.3f})")
    return np.linalg.solve(A, r)


def separable_likelihood(model: ObservationModel, y, point) -> float:
    """Per-user term of the separable likelihood (the single-user GLRT statistic)."""
    return glrt_statistic(model, y, point)


@dataclass
class UserEstimate:
    index: int
    doppler: float
    delay: float
    aoa: float
    gain: complex
    statistic: float


def estimate_all(cfg, arr, schedule, users, y, steps, refine_factor=10, levels=1,
                 diagonal=True, psi_source=None, cancel_passes=0) -> list:
    """Local fine-grid search per user, then gains from the correlation system.

    Parameters
    ----------
    steps : tuple
        Coarse ``(Doppler, delay, angle)`` spacing; each user is searched
        over ``+-1`` step around its prior.
    diagonal : bool
        Use only the diagonal of ``A`` for the gains (default). ``False``
        solves the full system.
    cancel_passes : int
        Extra passes in which every user is searched again on ``y`` minus
        the other users' reconstructed echoes. Each pass is one round of
        coordinate ascent on the joint likelihood; it removes the
        inter-stream leakage that the separable form ignores.
    """
    y = np.asarray(y)
    models = [user_model(cfg, arr, schedule, u, psi_source) for u in users]
    points, stats = [], []
    for m, u in zip(models, users):
        pt, s = refine_local(m, y, u.prior, steps, refine_factor, levels)
        points.append(pt)
        stats.append(s)
    h = joint_gain_estimate(correlations(models, y, points), diagonal=diagonal)
    for _ in range(cancel_passes):
        echoes = [g * m.signal(*pt) for g, m, pt in zip(h, models, points)]
        total = sum(echoes)
        for p, (m, u) in enumerate(zip(models, users)):
            points[p], stats[p] = refine_local(m, y - (total - echoes[p]), u.prior, steps,
                                               refine_factor, levels)
        h = joint_gain_estimate(correlations(models, y, points), diagonal=diagonal)
    return [UserEstimate(u.index, *pt, complex(g), s) for u, pt, g, s in zip(users, points, h, stats)]

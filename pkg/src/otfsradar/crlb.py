"""Fisher information and Cramer-Rao bounds for a single target.

The noise-free signal of block ``b`` is modelled with the separable
crosstalk approximation,

    s_b = A exp(j psi) (U_b^H a(phi) a(phi)^H f) kron (Psi_bar(nu, tau) x_b),

and the Fisher matrix is ``(2 / sigma^2) Re sum_b (ds_b/dtheta_i)^H (ds_b/dtheta_j)``
averaged over the symbols. Parameters are ordered ``(A, psi, phi, tau, nu)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import UlaArray, steering_derivative, steering_vector
from .errors import ConfigurationError, DomainError, SingularFisherError
from .otfs import generate_symbols, psi_approx, psi_approx_derivatives

PARAM_NAMES = ("A", "psi", "phi", "tau", "nu")


@dataclass(frozen=True)
class ParamVector:
    """Amplitude, phase (rad), delay (s), Doppler (Hz) and angle of arrival (rad)."""

    A: float
    psi: float
    tau: float
    nu: float
    phi: float

    def __post_init__(self):
        if self.A < 0:
            raise DomainError("amplitude must be nonnegative")

    @classmethod
    def from_target(cls, target):
        return cls(abs(target.gain), float(np.angle(target.gain)), target.delay, target.doppler,
                   target.aoa)

    @property
    def gain(self) -> complex:
        return self.A * np.exp(1j * self.psi)

    def ordered(self):
        """Values in Fisher order ``(A, psi, phi, tau, nu)``."""
        return np.array([self.A, self.psi, self.phi, self.tau, self.nu])

    def shifted(self, index: int, delta: float) -> "ParamVector":
        """Copy with the parameter at Fisher position ``index`` moved by ``delta``."""
        v = self.ordered()
        v[index] += delta
        A, psi, phi, tau, nu = v
        return ParamVector(A, psi, tau, nu, phi)


class SignalModel:
    """Single-target signal mean and derivatives for a fixed schedule and beam.

    Parameters
    ----------
    cfg : OtfsConfig
    arr : UlaArray
    schedule : sequence of ndarray
        ``U_b`` matrices (``N_a x N_rf``).
    beam : ndarray
        Transmit beam ``f`` (length ``N_a``).
    """

    def __init__(self, cfg, arr: UlaArray, schedule, beam):
        self.cfg = cfg
        self.arr = arr
        mats = getattr(schedule, "matrices", schedule)
        self.U = np.stack([np.asarray(U, dtype=complex) for U in mats])
        self.f = np.asarray(beam, dtype=complex).ravel()
        if self.U.shape[1] != arr.n_antennas or self.f.size != arr.n_antennas:
            raise ConfigurationError("schedule and beam must match the array size")

    @property
    def blocks(self):
        return self.U.shape[0]

    def beam_vectors(self, phi):
        """``v_b = U_b^H a a^H f`` and ``dv_b / dphi``, each ``(B, N_rf)``."""
        a = steering_vector(self.arr, phi)
        da = steering_derivative(self.arr, phi)
        Uh = self.U.conj().transpose(0, 2, 1)
        g = np.vdot(a, self.f)
        dg = np.vdot(da, self.f)
        v = (Uh @ a) * g
        dv = (Uh @ da) * g + (Uh @ a) * dg
        return v, dv

    def aoa_factor(self, phi):
        """``j pi cos(phi) U_b^H (a a^H * B) f`` with ``B[m, m'] = m - m'``."""
        a = steering_vector(self.arr, phi)
        m = np.arange(self.arr.n_antennas)
        Bm = m[:, None] - m[None, :]
        K = np.outer(a, a.conj()) * Bm
        return 1j * np.pi * np.cos(phi) * (self.U.conj().transpose(0, 2, 1) @ (K @ self.f))

    def _blocks(self, x):
        x = np.asarray(x)
        return x.reshape(self.blocks, self.cfg.size)

    def mean(self, theta: ParamVector, x) -> np.ndarray:
        """Noise-free signal, shape ``(B, N_rf * NM)``."""
        v, _ = self.beam_vectors(theta.phi)
        z = self._blocks(x) @ psi_approx(self.cfg, theta.nu, theta.tau).T
        return theta.gain * (v[:, :, None] * z[:, None, :]).reshape(self.blocks, -1)

    def derivatives(self, theta: ParamVector, x) -> np.ndarray:
        """Derivatives in Fisher order, shape ``(5, B, N_rf * NM)``."""
        P, Pt, Pn = psi_approx_derivatives(self.cfg, theta.nu, theta.tau)
        xb = self._blocks(x)
        z, zt, zn = xb @ P.T, xb @ Pt.T, xb @ Pn.T
        v, _ = self.beam_vectors(theta.phi)
        dv = self.aoa_factor(theta.phi)
        h = theta.gain

        def kron(vv, zz):
            return (vv[:, :, None] * zz[:, None, :]).reshape(self.blocks, -1)

        base = kron(v, z)
        return np.stack([np.exp(1j * theta.psi) * base, 1j * h * base, h * kron(dv, z),
                         h * kron(v, zt), h * kron(v, zn)])


def signal_mean(theta, model: SignalModel, x):
    return model.mean(theta, x)


def signal_derivatives(theta, model: SignalModel, x):
    return model.derivatives(theta, x)


def fisher_from_derivatives(D, sigma2) -> np.ndarray:
    """``(2 / sigma^2) Re sum (d_i^H d_j)`` over all samples."""
    Dm = D.reshape(D.shape[0], -1)
    return 2.0 / sigma2 * np.real(Dm.conj() @ Dm.T)


def fisher_matrix(theta: ParamVector, model: SignalModel, sigma2: float, power: float,
                  method: str = "closed", mc_trials: int = 1000, rng=None,
                  per_block: bool = False) -> np.ndarray:
    """Fisher information over ``(A, psi, phi, tau, nu)``.

    Parameters
    ----------
    power : float
        Mean symbol power ``E|x|^2``.
    method : {"closed", "mc"}
        ``closed`` uses ``E[x x^H] = power I``, giving
        ``I_ij = (2 power / sigma^2) Re sum_b conj(c_i) c_j (v_ib^H v_jb) tr(M_i^H M_j)``
        with ``M`` one of ``Psi_bar`` and its delay and Doppler derivatives.
        ``mc`` averages the sample Fisher matrix over ``mc_trials`` QPSK draws.
    per_block : bool
        Return the ``(B, 5, 5)`` stack of per-block contributions.
    """
    if not sigma2 > 0:
        raise DomainError("noise variance must be positive")
    if method == "mc":
        if mc_trials < 1:
            raise DomainError("mc_trials must be at least 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        acc = np.zeros((model.blocks, 5, 5))
        for _ in range(mc_trials):
            x = generate_symbols(model.cfg, 1, power, rng, blocks=model.blocks)
            D = model.derivatives(theta, x)
            acc += 2.0 / sigma2 * np.real(np.einsum("ibk,jbk->bij", D.conj(), D))
        I = acc / mc_trials
        return I if per_block else I.sum(axis=0)
    if method != "closed":
        raise ConfigurationError(f"unknown Fisher method {method!r}")
    P, Pt, Pn = psi_approx_derivatives(model.cfg, theta.nu, theta.tau)
    mats = [P, P, P, Pt, Pn]
    v, _ = model.beam_vectors(theta.phi)
    dv = model.aoa_factor(theta.phi)
    vecs = [v, v, dv, v, v]
    h = theta.gain
    coef = [np.exp(1j * theta.psi), 1j * h, h, h, h]
    T = np.array([[np.vdot(Mi, Mj) for Mj in mats] for Mi in mats])
    V = np.einsum("ibr,jbr->bij", np.stack(vecs).conj(), np.stack(vecs))
    C = np.outer(np.conj(coef), coef)
    I = 2.0 * power / sigma2 * np.real(C[None] * V * T[None])
    return I if per_block else I.sum(axis=0)


def crlb(fim, cond_cap: float = 1e14) -> np.ndarray:
    """Diagonal of the inverse Fisher matrix.

    Raises
    ------
    SingularFisherError
        When the condition number of the diagonally scaled matrix exceeds
        ``cond_cap``.
    """
    fim = np.asarray(fim, dtype=float)
    d = np.sqrt(np.abs(np.diag(fim)))
    if np.any(d == 0):
        raise SingularFisherError("Fisher matrix has a zero diagonal entry", np.inf)
    S = fim / np.outer(d, d)
    cond = np.linalg.cond(S)
    if not cond < cond_cap:
        raise SingularFisherError(f"Fisher matrix condition number {cond:.3e} exceeds {cond_cap:.1e}",
                                  cond)
    return np.diag(np.linalg.inv(S)) / d ** 2


def compare_strategies(theta: ParamVector, cfg, arr, beam, schedules: dict, sigma2: float,
                       power: float, include_digital: bool = True) -> dict:
    """CRLB per strategy; adds the single-block fully digital reference ``U = I``.

    Returns
    -------
    dict
        ``name -> array of 5 variances`` in Fisher order.
    """
    out = {}
    for name, sch in schedules.items():
        out[name] = crlb(fisher_matrix(theta, SignalModel(cfg, arr, sch, beam), sigma2, power))
    if include_digital:
        ref = [np.eye(arr.n_antennas, dtype=complex)]
        out["fully_digital"] = crlb(fisher_matrix(theta, SignalModel(cfg, arr, ref, beam), sigma2, power))
    return out

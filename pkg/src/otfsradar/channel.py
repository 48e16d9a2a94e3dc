"""Array geometry, point-target channel, link budget and the received-signal simulator.

The effective channel of one block is ``G_b = (U_b^H a a^H F) kron Psi``.
Its first factor is ``N_rf x N_s`` and selects the outer (slowest) index of
the stacked vectors: a received vector is ``[rf_0 (NM); rf_1 (NM); ...]`` and
a transmitted one ``[stream_0 (NM); stream_1 (NM); ...]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DomainError
from .otfs import OtfsConfig, PsiCache, psi

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class UlaArray:
    """Half-wavelength uniform linear array, shared by Tx and Rx (mono-static)."""

    n_antennas: int

    def __post_init__(self):
        if int(self.n_antennas) != self.n_antennas or self.n_antennas < 1:
            raise ConfigurationError("n_antennas must be a positive integer")


def steering_vector(arr: UlaArray, phi) -> np.ndarray:
    """Array response ``a(phi)[n] = exp(j n pi sin phi)``, ``n = 0 .. N_a - 1``.

    Scalar ``phi`` gives a vector of length ``N_a``; an array of angles gives
    an ``N_a x len(phi)`` matrix with one response per column.
    """
    phi_arr = np.asarray(phi, dtype=float)
    if np.any(np.abs(phi_arr) > np.pi / 2 + 1e-12) or not np.all(np.isfinite(phi_arr)):
        raise DomainError("angle must lie in [-pi/2, pi/2]")
    n = np.arange(arr.n_antennas)
    if phi_arr.ndim == 0:
        return np.exp(1j * np.pi * n * np.sin(phi_arr))
    return np.exp(1j * np.pi * np.outer(n, np.sin(phi_arr.ravel())))


def steering_derivative(arr: UlaArray, phi: float) -> np.ndarray:
    """``d a / d phi``."""
    n = np.arange(arr.n_antennas)
    return 1j * np.pi * np.cos(phi) * n * steering_vector(arr, phi)


@dataclass(frozen=True)
class LinkBudget:
    """Radar link parameters in SI units.

    Parameters
    ----------
    fc : float
        Carrier frequency in Hz.
    bandwidth : float
        Signal bandwidth ``W`` in Hz.
    p_avg : float
        Average transmit power in W.
    sigma_rcs : float
        Radar cross section in m^2.
    noise_psd : float
        One-sided noise spectral density ``N_0`` in W/Hz.
    noise_figure : float
        Receiver noise figure as a linear factor.
    """

    fc: float
    bandwidth: float
    p_avg: float
    sigma_rcs: float = 1.0
    noise_psd: float = 2e-21
    noise_figure: float = 10 ** 0.3

    def __post_init__(self):
        if not (self.fc > 0 and self.bandwidth > 0 and self.p_avg > 0):
            raise ConfigurationError("fc, bandwidth and p_avg must be positive")
        if self.sigma_rcs < 0:
            raise ConfigurationError("sigma_rcs must be nonnegative")
        if not (self.noise_psd > 0 and self.noise_figure > 0):
            raise ConfigurationError("noise_psd and noise_figure must be positive")

    @classmethod
    def from_db(cls, fc, bandwidth, p_avg_dbm, sigma_rcs=1.0, noise_psd=2e-21, noise_figure_db=3.0):
        """Build from a dBm transmit power and a dB noise figure."""
        return cls(fc, bandwidth, 1e-3 * 10 ** (p_avg_dbm / 10), sigma_rcs, noise_psd,
                   10 ** (noise_figure_db / 10))

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.fc

    @property
    def noise_var(self) -> float:
        """Per-sample noise variance ``N_0 W NF``."""
        return self.noise_psd * self.bandwidth * self.noise_figure


def path_gain_sq(link: LinkBudget, range_m: float) -> float:
    """Two-way path gain ``lambda^2 sigma / ((4 pi)^3 r^4)``."""
    if not range_m > 0:
        raise DomainError("range must be positive")
    return link.wavelength ** 2 * link.sigma_rcs / ((4 * np.pi) ** 3 * range_m ** 4)


def radar_snr(link: LinkBudget, range_m: float) -> float:
    """Receive SNR of a point target at ``range_m``."""
    return path_gain_sq(link, range_m) * link.p_avg / link.noise_var


def gain_from_range(link: LinkBudget, range_m: float, rng) -> complex:
    """Complex two-way gain with the path-loss magnitude and a uniform random phase."""
    amp = np.sqrt(path_gain_sq(link, range_m))
    return complex(amp * np.exp(2j * np.pi * rng.random()))


@dataclass(frozen=True)
class Target:
    """Point scatterer: complex gain, Doppler (Hz), delay (s), angle of arrival (rad)."""

    gain: complex
    doppler: float
    delay: float
    aoa: float

    def __post_init__(self):
        if abs(self.aoa) > np.pi / 2:
            raise DomainError("aoa must lie in [-pi/2, pi/2]")
        if self.delay < 0:
            raise DomainError("delay must be nonnegative")

    @classmethod
    def from_kinematics(cls, link: LinkBudget, range_m: float, velocity: float, aoa: float,
                        rng=None, gain: complex | None = None):
        """Round-trip conversion ``nu = 2 v fc / c``, ``tau = 2 r / c``.

        When ``gain`` is omitted it is drawn with :func:`gain_from_range`
        (requires ``rng``); the kinematic phase ``exp(j 2 pi nu tau)`` is
        folded into the gain.
        """
        nu = 2 * velocity * link.fc / SPEED_OF_LIGHT
        tau = 2 * range_m / SPEED_OF_LIGHT
        if gain is None:
            if rng is None:
                raise ConfigurationError("either gain or rng is required")
            gain = gain_from_range(link, range_m, rng) * np.exp(2j * np.pi * nu * tau)
        return cls(complex(gain), nu, tau, aoa)

    @property
    def amplitude(self) -> float:
        return abs(self.gain)

    @property
    def phase(self) -> float:
        return float(np.angle(self.gain))

    def check_unambiguous(self, cfg: OtfsConfig):
        """Reject targets that would alias on the signed Doppler-delay grid."""
        if not self.delay < cfg.N * cfg.T:
            raise DomainError(f"delay {self.delay!r} s is not below NT")
        if not abs(self.doppler) < cfg.delta_f / 2:
            raise DomainError(f"Doppler {self.doppler!r} Hz is not below delta_f / 2")


class KronOperator:
    """Implicit ``left kron right`` with products computed blockwise."""

    def __init__(self, left, right):
        self.left = np.asarray(left)
        self.right = np.asarray(right)

    @property
    def shape(self):
        return (self.left.shape[0] * self.right.shape[0], self.left.shape[1] * self.right.shape[1])

    def matvec(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.shape[1]:
            raise ConfigurationError(f"vector of length {x.shape[-1]} for operator {self.shape}")
        X = x.reshape(x.shape[:-1] + (self.left.shape[1], self.right.shape[1]))
        Y = self.left @ (X @ self.right.T)
        return Y.reshape(x.shape[:-1] + (self.shape[0],))

    __matmul__ = matvec

    def toarray(self):
        return np.kron(self.left, self.right)


def beam_factor(U, F, arr: UlaArray, phi) -> np.ndarray:
    """``U^H a(phi) a(phi)^H F`` (``N_rf x N_s``)."""
    U = np.atleast_2d(np.asarray(U))
    F = np.asarray(F)
    F = F[:, None] if F.ndim == 1 else F
    if U.shape[0] != arr.n_antennas or F.shape[0] != arr.n_antennas:
        raise ConfigurationError(
            f"beam matrices {U.shape} and {F.shape} do not match N_a={arr.n_antennas}")
    a = steering_vector(arr, phi)
    return np.outer(U.conj().T @ a, a.conj() @ F)


def effective_channel(U, F, psi_matrix, phi, arr: UlaArray | None = None) -> KronOperator:
    """Effective channel ``(U^H a a^H F) kron Psi`` of one block, as a :class:`KronOperator`."""
    U = np.asarray(U)
    if arr is None:
        arr = UlaArray(U.shape[0])
    psi_matrix = np.asarray(psi_matrix)
    if psi_matrix.ndim != 2 or psi_matrix.shape[0] != psi_matrix.shape[1]:
        raise ConfigurationError("crosstalk matrix must be square")
    return KronOperator(beam_factor(U, F, arr, phi), psi_matrix)


def unit_columns(M) -> np.ndarray:
    """Scale every column to unit Euclidean norm."""
    M = np.asarray(M, dtype=complex)
    norms = np.linalg.norm(M, axis=0)
    if np.any(norms == 0):
        raise DomainError("zero column")
    return M / norms


@dataclass
class Scenario:
    """Everything the simulator needs for one frame sequence.

    ``schedule`` holds the ``B`` receive matrices ``U_b`` (``N_a x N_rf``),
    ``tx_beams`` the ``N_a x N_s`` precoder. ``noise_var`` overrides the
    link-budget value when set (``0`` gives noiseless runs).
    """

    cfg: OtfsConfig
    link: LinkBudget
    array: UlaArray
    tx_beams: np.ndarray
    schedule: list
    targets: list = field(default_factory=list)
    noise_var: float | None = None
    psi_kind: str = "exact"

    def __post_init__(self):
        self.tx_beams = np.asarray(self.tx_beams, dtype=complex)
        if self.tx_beams.ndim == 1:
            self.tx_beams = self.tx_beams[:, None]
        mats = getattr(self.schedule, "matrices", self.schedule)
        self.schedule = [np.asarray(U, dtype=complex) for U in mats]
        if not self.schedule:
            raise ConfigurationError("schedule must contain at least one block")
        na = self.array.n_antennas
        if self.tx_beams.shape[0] != na:
            raise ConfigurationError(f"tx beams have {self.tx_beams.shape[0]} rows, array has {na}")
        n_rf = self.schedule[0].shape[1]
        for b, U in enumerate(self.schedule):
            if U.shape != (na, n_rf):
                raise ConfigurationError(f"block {b} matrix has shape {U.shape}, expected {(na, n_rf)}")

    @property
    def blocks(self) -> int:
        return len(self.schedule)

    @property
    def streams(self) -> int:
        return self.tx_beams.shape[1]

    @property
    def n_rf(self) -> int:
        return self.schedule[0].shape[1]

    @property
    def sigma2(self) -> float:
        return self.link.noise_var if self.noise_var is None else float(self.noise_var)

    def with_targets(self, targets):
        return replace(self, targets=list(targets))


def noiseless_rx(sc: Scenario, symbols) -> np.ndarray:
    """Sum of target echoes per block, shape ``(B, N_rf * NM)``."""
    x = np.asarray(symbols)
    B, NM = sc.blocks, sc.cfg.size
    if x.shape[0] != B:
        raise ConfigurationError(f"{x.shape[0]} symbol blocks for {B} schedule blocks")
    if x.shape[1:] not in ((sc.streams, sc.cfg.N, sc.cfg.M), (sc.streams * NM,)):
        raise ConfigurationError(f"symbol array of shape {x.shape} does not match the scenario")
    xv = x.reshape(B, sc.streams * NM)
    y = np.zeros((B, sc.n_rf * NM), dtype=complex)
    for tgt in sc.targets:
        P = psi(sc.cfg, tgt.doppler, tgt.delay, sc.psi_kind)
        for b, U in enumerate(sc.schedule):
            y[b] += tgt.gain * effective_channel(U, sc.tx_beams, P, tgt.aoa, sc.array).matvec(xv[b])
    return y


def simulate_rx(sc: Scenario, symbols, rng) -> np.ndarray:
    """Received beam-space vectors ``y_b = sum_p h_p G_b(p) x_b + w_b``.

    Parameters
    ----------
    sc : Scenario
    symbols : ndarray
        ``(B, N_s, N, M)`` Doppler-delay symbols, one set per block.
    rng : numpy.random.Generator
        Source of the circularly-symmetric Gaussian noise.

    Returns
    -------
    ndarray
        ``(B, N_rf * NM)`` received vectors.
    """
    y = noiseless_rx(sc, symbols)
    s2 = sc.sigma2
    if s2 > 0:
        w = rng.standard_normal(y.shape + (2,)) @ np.array([1.0, 1j])
        y = y + np.sqrt(s2 / 2) * w
    return y


def resolutions(cfg: OtfsConfig, link: LinkBudget, arr: UlaArray):
    """Velocity (m/s), range (m) and angular (rad) resolution."""
    W = link.bandwidth
    v_res = SPEED_OF_LIGHT * W / (2 * cfg.N * cfg.M * link.fc)
    r_res = SPEED_OF_LIGHT / (2 * W)
    theta_res = 1.22 * link.wavelength / (arr.n_antennas * link.wavelength / 2)
    return v_res, r_res, theta_res


class ObservationModel:
    """Fast matched-filter quantities for one scenario and a fixed symbol set.

    For a hypothesis ``(nu, tau, phi)`` the block product is rank-structured,
    ``G_b x_b = u_b(phi) kron w_b``, with ``u_b = U_b^H a`` and
    ``w_b = sum_s (a^H f_s) Psi x_{b,s}``. Correlations with ``y`` therefore
    need one pass of ``Psi`` over the symbols per ``(nu, tau)``; all angles
    are then evaluated at once.

    Parameters
    ----------
    cfg, array : OtfsConfig, UlaArray
    schedule : sequence of ndarray
        ``U_b`` matrices.
    tx_beams : ndarray
        ``N_a x N_s`` precoder.
    symbols : ndarray
        ``(B, N_s, N, M)``.
    psi_source : callable, optional
        ``(nu, tau) -> Psi``; defaults to uncached exact evaluation.
    """

    def __init__(self, cfg, array, schedule, tx_beams, symbols, psi_source=None):
        self.cfg = cfg
        self.array = array
        mats = getattr(schedule, "matrices", schedule)
        self.U = np.stack([np.asarray(U, dtype=complex) for U in mats])
        F = np.asarray(tx_beams, dtype=complex)
        self.F = F[:, None] if F.ndim == 1 else F
        x = np.asarray(symbols)
        B = self.U.shape[0]
        if x.shape[0] != B:
            raise ConfigurationError(f"{x.shape[0]} symbol blocks for {B} schedule blocks")
        self.X = x.reshape(B, self.F.shape[1], cfg.size)
        self.psi_source = psi_source or (lambda nu, tau: psi(cfg, nu, tau, "exact"))

    @property
    def n_rf(self):
        return self.U.shape[2]

    def angle_factors(self, phis):
        """``u[b, phi, r] = (U_b^H a)_r`` and ``g[phi, s] = a^H f_s``."""
        A = steering_vector(self.array, np.atleast_1d(phis))
        u = np.einsum("bnr,np->bpr", self.U.conj(), A)
        g = A.conj().T @ self.F
        return u, g

    def responses(self, nu, tau):
        """``Z[b, s] = Psi x_{b,s}``."""
        P = self.psi_source(nu, tau)
        return self.X @ P.T

    def correlate(self, y, nu, tau, phis, factors=None):
        """Numerator sum ``sum_b y_b^H G_b x_b`` and denominator ``sum_b ||G_b x_b||^2`` per angle."""
        u, g = factors if factors is not None else self.angle_factors(phis)
        Z = self.responses(nu, tau)
        Y = np.asarray(y).reshape(self.U.shape[0], self.n_rf, self.cfg.size)
        Q = np.einsum("brk,bsk->brs", Y.conj(), Z)
        R = np.einsum("bsk,btk->bst", Z.conj(), Z)
        num = np.einsum("bpr,brs,ps->p", u, Q, g)
        un = np.sum(np.abs(u) ** 2, axis=2)
        quad = np.einsum("ps,bst,pt->bp", g.conj(), R, g).real
        den = np.sum(un * quad, axis=0)
        return num, den

    def signal(self, nu, tau, phi):
        """Stacked ``G_b x_b`` for a unit-gain hypothesis, shape ``(B, N_rf * NM)``."""
        u, g = self.angle_factors(phi)
        Z = self.responses(nu, tau)
        w = np.einsum("s,bsk->bk", g[0], Z)
        return (u[:, 0, :, None] * w[:, None, :]).reshape(self.U.shape[0], -1)


def make_psi_source(cfg, kind="exact", nu_step=None, tau_step=None, maxsize=1024):
    """Cached crosstalk provider on a lattice; uncached when no steps are given."""
    if nu_step is None or tau_step is None:
        return lambda nu, tau: psi(cfg, nu, tau, kind)
    return PsiCache(cfg, nu_step, tau_step, kind=kind, maxsize=maxsize)

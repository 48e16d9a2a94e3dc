"""OTFS transforms, pulse ambiguity and the Doppler-delay crosstalk matrix.

Index convention used everywhere in the package: a Doppler-delay block of
shape ``(N, M)`` is vectorised row-major, so bin ``(k, l)`` sits at position
``k * M + l``. Crosstalk matrices map transmitted bins (columns) onto
received bins (rows) with that same pairing.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class OtfsConfig:
    """Grid dimensions and numerology of one OTFS frame.

    Parameters
    ----------
    N : int
        Number of Doppler bins (OTFS symbols per frame).
    M : int
        Number of delay bins (subcarriers).
    delta_f : float
        Subcarrier spacing in Hz.
    T : float, optional
        Symbol time in s. Defaults to ``1 / delta_f``; any other value must
        still satisfy ``T * delta_f == 1``.
    """

    N: int
    M: int
    delta_f: float
    T: float | None = None

    def __post_init__(self):
        if int(self.N) != self.N or int(self.M) != self.M or self.N < 1 or self.M < 1:
            raise ConfigurationError(f"N and M must be positive integers, got N={self.N}, M={self.M}")
        if not self.delta_f > 0:
            raise ConfigurationError("delta_f must be positive")
        if self.T is None:
            object.__setattr__(self, "T", 1.0 / self.delta_f)
        if abs(self.T * self.delta_f - 1.0) > 1e-12:
            raise ConfigurationError(f"T * delta_f must equal 1, got {self.T * self.delta_f!r}")

    @property
    def size(self) -> int:
        return self.N * self.M

    @property
    def bandwidth(self) -> float:
        return self.M * self.delta_f

    @property
    def doppler_step(self) -> float:
        """Doppler grid spacing 1/(NT)."""
        return 1.0 / (self.N * self.T)

    @property
    def delay_step(self) -> float:
        """Delay grid spacing 1/(M delta_f)."""
        return 1.0 / (self.M * self.delta_f)


@dataclass(frozen=True)
class PulseShape:
    """Transmit/receive shaping pulse. Only the unit-energy rectangle is supported."""

    kind: str = "rectangular"
    duration: float = 1.0


def _check_block(a, cfg):
    a = np.asarray(a)
    if a.shape[-2:] != (cfg.N, cfg.M):
        raise ConfigurationError(f"block has shape {a.shape[-2:]}, expected {(cfg.N, cfg.M)}")
    return a


def isfft(x, cfg: OtfsConfig) -> np.ndarray:
    """Doppler-delay block(s) to time-frequency block(s), no normalisation.

    ``X[n, m] = sum_{k,l} x[k, l] exp(j 2 pi (n k / N - m l / M))``. Leading
    axes are treated as a batch (e.g. one layer per data stream).
    """
    x = _check_block(x, cfg)
    return cfg.N * np.fft.ifft(np.fft.fft(x, axis=-1), axis=-2)


def sfft(Y, cfg: OtfsConfig) -> np.ndarray:
    """Inverse of :func:`isfft`: ``y[k, l] = (1/NM) sum Y[n, m] exp(j 2 pi (m l / M - n k / N))``."""
    Y = _check_block(Y, cfg)
    return np.fft.fft(np.fft.ifft(Y, axis=-1), axis=-2) / cfg.N


def cross_ambiguity(pulse: PulseShape, tau, nu):
    """Cross ambiguity ``C(tau, nu) = int g(s) g*(s - tau) exp(-j 2 pi nu s) ds``.

    Closed form for the unit-energy rectangular pulse of duration ``T``:
    the integrand lives on the overlap ``[max(0, tau), min(T, T + tau)]``.
    Broadcasts over ``tau`` and ``nu``.
    """
    if pulse.kind != "rectangular":
        raise NotImplementedError(f"pulse kind {pulse.kind!r} is not supported")
    T = pulse.duration
    tau, nu = np.broadcast_arrays(np.asarray(tau, dtype=float), np.asarray(nu, dtype=float))
    lo = np.maximum(0.0, tau)
    hi = np.minimum(T, T + tau)
    length = np.clip(hi - lo, 0.0, None)
    # (e^{-j2 pi nu lo} - e^{-j2 pi nu hi}) / (j 2 pi nu T), written through the
    # midpoint so that nu -> 0 reduces to length / T without a case split
    mid = 0.5 * (lo + hi)
    out = np.exp(-2j * np.pi * nu * mid) * length * np.sinc(nu * length) / T
    return np.where(length > 0, out, 0.0)


def _check_range(cfg, nu, tau):
    if not (0.0 <= tau < cfg.N * cfg.T):
        raise DomainError(f"delay {tau!r} s outside [0, NT)")
    if not abs(nu) < cfg.M * cfg.delta_f:
        raise DomainError(f"Doppler {nu!r} Hz outside (-M delta_f, M delta_f)")


def _dd_kernel(cfg):
    # E[(n, m), (k, l)] = exp(j 2 pi (n k / N - m l / M))
    n = np.arange(cfg.N)
    m = np.arange(cfg.M)
    en = np.exp(2j * np.pi * np.outer(n, n) / cfg.N)
    em = np.exp(-2j * np.pi * np.outer(m, m) / cfg.M)
    return np.einsum("nk,ml->nmkl", en, em).reshape(cfg.size, cfg.size)


_KERNELS: dict = {}


def _kernel(cfg):
    key = (cfg.N, cfg.M)
    if key not in _KERNELS:
        _KERNELS[key] = _dd_kernel(cfg)
    return _KERNELS[key]


def tf_channel(cfg: OtfsConfig, pulse: PulseShape, nu: float, tau: float) -> np.ndarray:
    """Sampled time-frequency channel ``H[(n, m), (n', m')]`` of a unit point scatterer."""
    T, df = cfg.T, cfg.delta_f
    n = np.arange(cfg.N)
    m = np.arange(cfg.M)
    dn = (n[:, None] - n[None, :]) * T - tau
    dm = (m[:, None] - m[None, :]) * df - nu
    C = cross_ambiguity(pulse, dn[:, None, :, None], dm[None, :, None, :])
    H = (C * np.exp(2j * np.pi * n * T * nu)[None, None, :, None]
         * np.exp(-2j * np.pi * m * df * tau)[None, :, None, None])
    return H.reshape(cfg.size, cfg.size)


def psi_exact(cfg: OtfsConfig, pulse: PulseShape | None, nu: float, tau: float) -> np.ndarray:
    """Crosstalk matrix from the full quadruple sum over the sampled filter bank.

    Row ``k*M + l`` / column ``k'*M + l'`` holds the coupling from transmitted
    bin ``(k', l')`` to received bin ``(k, l)``. The sum factorises as
    ``E^H H E / NM`` with ``E`` the ISFFT kernel and ``H`` the sampled
    time-frequency channel, which is how it is evaluated here.
    """
    _check_range(cfg, nu, tau)
    if pulse is None:
        pulse = PulseShape("rectangular", cfg.T)
    E = _kernel(cfg)
    return E.conj().T @ tf_channel(cfg, pulse, nu, tau) @ E / cfg.size


def _approx_parts(cfg, nu, tau):
    N, M, T, df = cfg.N, cfg.M, cfg.T, cfg.delta_f
    l_tau = int(np.ceil(tau * M * df - 1e-9))
    isi = np.arange(M) >= M - l_tau

    n = np.arange(N)
    np_ = np.arange(N)
    # alpha summed over n': rows = received Doppler n, cols = transmitted k
    ph_a = np.exp(2j * np.pi * (n[None, :, None] - n[:, None, None] + nu * N * T) * np_ / N)
    a_sum = ph_a.sum(-1)
    a_dnu = (ph_a * (2j * np.pi * np_ * T)).sum(-1)

    m = np.arange(M)
    mp = np.arange(M)
    ph_b = np.exp(2j * np.pi * (m[:, None, None] - m[None, :, None] - tau * M * df) * mp / M)
    b_sum = ph_b.sum(-1)  # rows = received delay m, cols = transmitted l
    b_dtau = (ph_b * (-2j * np.pi * mp * df)).sum(-1)
    l_ph = np.exp(2j * np.pi * nu * m / (M * df))
    g = m / (M * df) - np.where(isi, T, 0.0)

    # ISI factor depends on the transmitted pair (k, l)
    fac = np.where(isi[None, :], np.exp(-2j * np.pi * (nu * T + n[:, None] / N)), 1.0)
    return a_sum, a_dnu, b_sum * l_ph, b_dtau * l_ph, g, fac


def psi_approx(cfg: OtfsConfig, nu: float, tau: float) -> np.ndarray:
    """Separable approximation of the crosstalk matrix.

    ``(1/NM) sum_n' alpha(n, k, n') sum_m' beta(m', k, m, l)`` with the
    delay kernel split into the inter-carrier part ``l < M - l_tau`` and the
    wrapped inter-symbol part, ``l_tau = ceil(tau M delta_f)``.
    """
    _check_range(cfg, nu, tau)
    a_sum, _, b_sum, _, _, fac = _approx_parts(cfg, nu, tau)
    P = a_sum[:, None, :, None] * b_sum[None, :, None, :] * fac[None, None, :, :]
    return P.reshape(cfg.size, cfg.size) / cfg.size


def psi_approx_derivatives(cfg: OtfsConfig, nu: float, tau: float):
    """Return ``(psi_bar, d psi_bar / d tau, d psi_bar / d nu)``.

    ``l_tau`` is piecewise constant in ``tau`` and is held fixed, as in the
    closed-form derivation.
    """
    _check_range(cfg, nu, tau)
    a_sum, a_dnu, b_sum, b_dtau, g, fac = _approx_parts(cfg, nu, tau)
    shape = (cfg.size, cfg.size)
    base = fac[None, None, :, :] / cfg.size
    P = (a_sum[:, None, :, None] * b_sum[None, :, None, :] * base).reshape(shape)
    Pt = (a_sum[:, None, :, None] * b_dtau[None, :, None, :] * base).reshape(shape)
    Pn = ((a_dnu[:, None, :, None] * b_sum[None, :, None, :]
           + 2j * np.pi * g[None, None, None, :] * a_sum[:, None, :, None] * b_sum[None, :, None, :])
          * base).reshape(shape)
    return P, Pt, Pn


class PsiCache:
    """Memoised crosstalk matrices on a quantised (Doppler, delay) lattice.

    Keys are the integer lattice coordinates ``round(nu / nu_step)``,
    ``round(tau / tau_step)``; the matrix is evaluated at the lattice point
    itself, so every caller asking for nearby values receives the same
    matrix. Thread-safe; process pools get one cache per worker.
    """

    def __init__(self, cfg, nu_step, tau_step, kind="exact", pulse=None, maxsize=1024):
        self.cfg = cfg
        self.nu_step = float(nu_step)
        self.tau_step = float(tau_step)
        self.kind = kind
        self.pulse = pulse or PulseShape("rectangular", cfg.T)
        self.maxsize = maxsize
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def key(self, nu, tau):
        return int(round(nu / self.nu_step)), int(round(tau / self.tau_step))

    def get(self, nu, tau):
        key = self.key(nu, tau)
        with self._lock:
            hit = self._data.get(key)
            if hit is not None:
                self._data.move_to_end(key)
                return hit
        value = psi(self.cfg, key[0] * self.nu_step, key[1] * self.tau_step, self.kind, self.pulse)
        value.setflags(write=False)
        with self._lock:
            self._data[key] = value
            if len(self._data) > self.maxsize:
                self._data.popitem(last=False)
        return value

    __call__ = get


class LatticePsiSource:
    """Crosstalk provider that caches points lying on any of several lattices.

    A point is served from the first lattice it sits on (to a relative
    tolerance of ``1e-9`` of the step); anything else is evaluated directly.
    Unlike :class:`PsiCache` it never snaps a point to a neighbour.

    Parameters
    ----------
    cfg : OtfsConfig
    steps : sequence of (nu_step, tau_step)
    maxsize : int or sequence of int
        Cache capacity per lattice.
    """

    def __init__(self, cfg, steps, kind="exact", pulse=None, maxsize=1024):
        sizes = [maxsize] * len(steps) if np.isscalar(maxsize) else list(maxsize)
        self.caches = [PsiCache(cfg, s[0], s[1], kind, pulse, n) for s, n in zip(steps, sizes)]
        self.cfg, self.kind, self.pulse = cfg, kind, pulse

    @staticmethod
    def _on(value, step):
        q = value / step
        return abs(q - round(q)) < 1e-9 * max(1.0, abs(q))

    def __call__(self, nu, tau):
        for c in self.caches:
            if self._on(nu, c.nu_step) and self._on(tau, c.tau_step):
                return c.get(nu, tau)
        return psi(self.cfg, nu, tau, self.kind, self.pulse)


def psi(cfg, nu, tau, kind="exact", pulse=None):
    """Dispatch to :func:`psi_exact` or :func:`psi_approx`."""
    if kind == "exact":
        return psi_exact(cfg, pulse, nu, tau)
    if kind == "approx":
        return psi_approx(cfg, nu, tau)
    raise ConfigurationError(f"unknown crosstalk model {kind!r}")


def generate_symbols(cfg: OtfsConfig, streams: int, power: float, rng,
                     constellation: str = "qpsk", blocks: int | None = None) -> np.ndarray:
    """Draw i.i.d. Doppler-delay data symbols.

    Each symbol has mean power ``power / streams``. Returns an array of shape
    ``(streams, N, M)``, or ``(blocks, streams, N, M)`` when ``blocks`` is set.
    """
    if streams < 1:
        raise DomainError("at least one data stream is required")
    if not power > 0:
        raise DomainError("power must be positive")
    if constellation.lower() != "qpsk":
        raise NotImplementedError(f"constellation {constellation!r}")
    shape = (streams, cfg.N, cfg.M) if blocks is None else (blocks, streams, cfg.N, cfg.M)
    bits = rng.integers(0, 2, size=shape + (2,))
    sym = ((1 - 2 * bits[..., 0]) + 1j * (1 - 2 * bits[..., 1])) / np.sqrt(2)
    return sym * np.sqrt(power / streams)

"""Flat-top beam synthesis, steered codebooks and receive reduction schedules.

Beam weights are synthesised by a reweighted-least-squares FISTA on a
uniform angle grid. A finalised :class:`BeamVector` has unit power on its
synthesis grid, ``||A^H f||^2 = 1``; :func:`physical_beams` rescales columns
to unit Euclidean norm for use as transmit precoders or receive combiners.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .channel import UlaArray, steering_vector, unit_columns
from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class AngleGrid:
    """Uniformly spaced angles in radians."""

    points: np.ndarray

    @classmethod
    def synthesis(cls, G: int = 181):
        """``theta_g = -pi/2 + pi (g - 1) / G``, ``g = 1 .. G``."""
        if G < 2:
            raise ConfigurationError("synthesis grid needs at least two points")
        return cls(-np.pi / 2 + np.pi * np.arange(G) / G)

    @classmethod
    def uniform(cls, lo: float, hi: float, step: float):
        """Closed grid from ``lo`` to ``hi`` (radians) with the given step."""
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return cls(lo + step * np.arange(n))

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def step(self) -> float:
        return float(self.points[1] - self.points[0]) if self.size > 1 else 0.0

    def __eq__(self, other):
        return isinstance(other, AngleGrid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())


def array_factor_matrix(arr: UlaArray, grid: AngleGrid) -> np.ndarray:
    """``N_a x G`` matrix whose column ``g`` is ``a(theta_g)``."""
    return steering_vector(arr, grid.points)


@dataclass(frozen=True)
class BeamMask:
    """Desired pattern magnitude over a synthesis grid.

    ``desired`` is ``main_level`` inside ``main`` (a boolean mask over the grid),
    ``peripheral_level`` inside ``side``. Grid points in neither set form a
    transition band that the synthesis ignores.
    """

    grid: AngleGrid
    desired: np.ndarray
    main: np.ndarray
    side: np.ndarray
    main_level: float
    peripheral_level: float

    @property
    def transition(self) -> np.ndarray:
        return ~(self.main | self.side)


def flat_top_mask(grid: AngleGrid, width: float, transition: float | None = None,
                  peripheral_ratio: float = 0.0) -> BeamMask:
    """Boresight flat-top mask of total angular ``width`` (radians).

    The main section is ``|theta| <= width / 2``. Sidelobe points start
    ``transition`` radians past its edge (no gap by default; see
    :func:`default_transition` for an array-dependent choice). Levels satisfy ``G_m sigma_m^2 + G_p sigma_p^2 = 1`` with
    ``sigma_p = peripheral_ratio * sigma_m``.
    """
    if not 0 < width < np.pi:
        raise DomainError("mask width must lie in (0, pi)")
    if not 0 <= peripheral_ratio < 1:
        raise DomainError("peripheral_ratio must lie in [0, 1)")
    th = grid.points
    edge = width / 2
    main = np.abs(th) <= edge + 1e-12
    if transition is None:
        transition = 0.0
    side = np.abs(th) > edge + transition + 1e-12
    gm, gp = main.sum(), side.sum()
    sigma_m = 1.0 / np.sqrt(gm + gp * peripheral_ratio ** 2)
    sigma_p = peripheral_ratio * sigma_m
    desired = np.where(main, sigma_m, np.where(side, sigma_p, 0.0))
    return BeamMask(grid, desired, main, side, float(sigma_m), float(sigma_p))


def default_transition(n_antennas: int, width: float, span: float = 4.0) -> float:
    """Transition gap beyond the mask edge, ``span / N_a`` wide in sine space.

    ``span = 4`` is one null-to-null beamwidth and suits wide transmit
    beams; codebook atoms use ``span = 2`` so that neighbouring atoms stay
    nearly orthogonal.
    """
    s_edge = np.sin(width / 2)
    s_out = min(s_edge + span / n_antennas, 1.0)
    return float(np.arcsin(s_out) - width / 2)


@dataclass
class BeamVector:
    """Beam weights together with the grid on which their power is normalised."""

    weights: np.ndarray
    grid: AngleGrid
    _pattern: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_antennas(self) -> int:
        return len(self.weights)

    @property
    def pattern(self) -> np.ndarray:
        if self._pattern is None:
            self._pattern = pattern_of(self, self.grid)
        return self._pattern

    def grid_power(self) -> float:
        A = array_factor_matrix(UlaArray(self.n_antennas), self.grid)
        return float(np.linalg.norm(A.conj().T @ self.weights) ** 2)


def pattern_of(f, grid: AngleGrid) -> np.ndarray:
    """Pattern magnitude ``|a(theta)^H f|`` at every grid angle."""
    w = f.weights if isinstance(f, BeamVector) else np.asarray(f)
    A = array_factor_matrix(UlaArray(len(w)), grid)
    return np.abs(A.conj().T @ w)


def normalize_power(f, A: np.ndarray, grid: AngleGrid | None = None) -> BeamVector:
    """Scale ``f`` so that ``||A^H f||^2 = 1``."""
    w = np.asarray(f.weights if isinstance(f, BeamVector) else f, dtype=complex)
    if grid is None:
        grid = f.grid if isinstance(f, BeamVector) else None
    p = np.linalg.norm(A.conj().T @ w)
    if p == 0:
        raise DomainError("cannot normalise a beam with zero radiated pattern")
    return BeamVector(w / p, grid)


def shrink(w: np.ndarray, alpha: float) -> np.ndarray:
    """Complex soft threshold: magnitude reduced by ``alpha`` (floored at 0), phase kept."""
    mag = np.abs(w)
    scale = np.maximum(mag - alpha, 0.0) / np.where(mag > 0, mag, 1.0)
    return w * scale


@dataclass(frozen=True)
class FistaParams:
    """Synthesis settings.

    Attributes
    ----------
    gamma : float
        Weight of the fit term against the l1 term.
    epsilon : float
        Mainlobe residual below which no reweighting happens.
    K_p, K_m : float
        Sidelobe and mainlobe reweighting gains.
    phase : {"linear", "chirp", "free"}
        Phase of the target pattern. ``linear`` is the centre-referenced
        ramp of a real symmetric taper. ``chirp`` adds a quadratic phase in
        sine space so that each direction of the main section is radiated
        mostly by a different part of the aperture. ``free`` solves the
        magnitude-only fit: starting from the linear ramp, the target phase
        follows the current pattern phase, updated together with ``D``.
    chirp : float
        Quadratic phase strength for ``phase="chirp"``; ``1`` spreads the
        main section over the whole aperture.
    max_iter, min_iter : int
    tol : float
        After ``min_iter`` iterations, stop when an accepted step lowers the
        objective (same weights) by less than this relative amount.
    """

    gamma: float = 1e4
    epsilon: float = 0.02
    K_p: float = 5.0
    K_m: float = 1.0
    phase: str = "linear"
    chirp: float = 2.0
    max_iter: int = 3000
    min_iter: int = 200
    tol: float = 1e-8


@dataclass
class FistaResult:
    beam: BeamVector
    raw: np.ndarray
    converged: bool
    iterations: int
    checkpoints: list
    weights: np.ndarray
    t_sequence: list


def target_response(mask: BeamMask, n_antennas: int, chirp: float = 0.0) -> np.ndarray:
    """Desired complex pattern: mask magnitude times the centre-referenced phase ramp.

    With ``chirp > 0`` the phase also carries ``-chirp (pi s)^2 / (4 kappa)``,
    ``kappa = pi w / (2 N_a)`` and ``w`` the sine-space width of the main
    section. This is the stationary-phase profile of a quadratic-phase
    aperture whose beam just fills the main section.
    """
    s = np.sin(mask.grid.points)
    phase = -np.pi * (n_antennas - 1) * s / 2
    if chirp:
        main = s[mask.main]
        kappa = np.pi * (main.max() - main.min()) / (2 * n_antennas)
        phase = phase - chirp * (np.pi * s) ** 2 / (4 * kappa)
    return mask.desired * np.exp(1j * phase)


def synth_fista(mask: BeamMask, arr: UlaArray, params: FistaParams = FistaParams(),
                callback=None) -> FistaResult:
    """Synthesise a beam whose pattern magnitude follows ``mask``.

    Minimises ``||w||_1 / (2 gamma) + 1/2 ||A^H w - b||_D^2`` by monotone
    FISTA. After every iteration the diagonal weights ``D`` grow where the
    pattern misses the mask: by ``K_m |r|`` in the main section when
    ``|r| >= epsilon``, by ``max(0, K_p r)`` in the sidelobes, with
    ``r = |pattern| - desired``. The step is ``1 / lambda_max(A D A^H)``.

    callback : callable, optional
        Called as ``callback(i, w, d)`` after iteration ``i`` with the
        accepted iterate and the weights the next step will use.

    Returns
    -------
    FistaResult
        ``beam`` is power-normalised; ``checkpoints`` lists, per iteration,
        the objective before and after the step under the same ``D``.
    """
    if not params.gamma > 0:
        raise DomainError("gamma must be positive")
    if params.phase not in ("linear", "chirp", "free"):
        raise ConfigurationError(f"unknown phase mode {params.phase!r}")
    A = array_factor_matrix(arr, mask.grid)
    P = A.conj().T
    b = target_response(mask, arr.n_antennas, params.chirp if params.phase == "chirp" else 0.0)
    d = np.where(mask.transition, 0.0, 1.0)

    def objective(w, d):
        r = P @ w - b
        return np.sum(np.abs(w)) / (2 * params.gamma) + 0.5 * np.sum(d * np.abs(r) ** 2)

    def lipschitz(d):
        return float(np.linalg.eigvalsh((A * d) @ P)[-1])

    w = np.zeros(arr.n_antennas, dtype=complex)
    y = w.copy()
    t = 1.0
    L = lipschitz(d)
    checkpoints = []
    ts = [t]
    converged = False
    it = 0
    for it in range(1, params.max_iter + 1):
        grad = P.conj().T @ (d * (P @ y - b))
        z = shrink(y - grad / L, 1.0 / (2 * params.gamma * L))
        f_old = objective(w, d)
        f_z = objective(z, d)
        w_new = z if f_z <= f_old else w
        f_new = min(f_z, f_old)
        t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
        y = w_new + (t / t_new) * (z - w_new) + ((t - 1) / t_new) * (w_new - w)
        checkpoints.append((f_old, f_new))
        w, t = w_new, t_new
        ts.append(t)

        r = np.abs(P @ w) - mask.desired
        s = np.zeros_like(d)
        s[mask.main] = np.where(np.abs(r[mask.main]) < params.epsilon * mask.main_level,
                                0.0, params.K_m * np.abs(r[mask.main]) / mask.main_level)
        s[mask.side] = np.maximum(0.0, params.K_p * r[mask.side] / mask.main_level)
        if it >= params.min_iter and f_z <= f_old and f_old - f_z <= params.tol * max(f_old, 1e-300):
            converged = True
            break
        if np.any(s > 0):
            d = d + s
            L = lipschitz(d)
        if params.phase == "free":
            pw = P @ w
            b = np.where(np.abs(pw) > 0, mask.desired * np.exp(1j * np.angle(pw)), b)
        if callback is not None:
            callback(it, w, d)
    if not np.any(w):
        raise DomainError("synthesis returned the zero vector; increase gamma")
    beam = normalize_power(w, A, mask.grid)
    return FistaResult(beam, w, converged, it, checkpoints, d, ts)


def physical_beams(beams) -> np.ndarray:
    """Stack beams as unit-norm columns (``N_a x K``)."""
    cols = [b.weights if isinstance(b, BeamVector) else np.asarray(b) for b in beams]
    return unit_columns(np.stack(cols, axis=1))


def steer_atom(f0: BeamVector, theta_c: float) -> BeamVector:
    """Shift the pattern of ``f0`` so that its boresight moves to ``theta_c``.

    Multiplying by the phase ramp ``a(theta_c)`` translates the pattern by
    ``sin theta_c`` in sine space. The result is renormalised on the grid.
    """
    arr = UlaArray(f0.n_antennas)
    w = f0.weights * steering_vector(arr, theta_c)
    return normalize_power(w, array_factor_matrix(arr, f0.grid), f0.grid)


def beam_metrics(f, mask: BeamMask):
    """Main-lobe ripple (dB) and peak sidelobe level relative to the mean main level (dB)."""
    p = pattern_of(f, mask.grid)
    main = p[mask.main]
    ripple = 20 * np.log10(main.max() / main.min())
    ref = np.sqrt(np.mean(main ** 2))
    sll = 20 * np.log10(p[mask.side].max() / ref) if mask.side.any() else -np.inf
    return float(ripple), float(sll)


@dataclass
class Codebook:
    """Steered copies of one fundamental beam over a field of view.

    ``atoms[i][j]`` points at ``fov[0] + i * dtheta + j * ddtheta``.
    """

    atoms: list
    fov: tuple
    dtheta: float
    ddtheta: float
    fundamental: BeamVector

    @property
    def n_coarse(self) -> int:
        return len(self.atoms)

    @property
    def n_fine(self) -> int:
        return len(self.atoms[0])

    def center(self, i: int, j: int) -> float:
        return self.fov[0] + i * self.dtheta + j * self.ddtheta

    def flat(self):
        """``[((i, j), center, atom), ...]`` in row-major order."""
        return [((i, j), self.center(i, j), self.atoms[i][j])
                for i in range(self.n_coarse) for j in range(self.n_fine)]

    @property
    def n_antennas(self) -> int:
        return self.fundamental.n_antennas

    def manifest(self, file_pattern="atom_{i}_{j}.csv") -> str:
        """JSON manifest of atom indices, centres (degrees) and pattern file names."""
        rows = [{"i": i, "j": j, "center_deg": round(float(np.degrees(c)), 10),
                 "file": file_pattern.format(i=i, j=j)} for (i, j), c, _ in self.flat()]
        meta = {"fov_deg": [float(np.degrees(v)) for v in self.fov],
                "dtheta_deg": float(np.degrees(self.dtheta)),
                "ddtheta_deg": float(np.degrees(self.ddtheta)),
                "n_antennas": self.n_antennas, "atoms": rows}
        return json.dumps(meta, indent=2, sort_keys=True)


def _ratio(total, step, what):
    q = total / step
    if abs(q - round(q)) > 1e-9 or round(q) < 1:
        raise ConfigurationError(f"{what} is not an integer multiple ({q!r})")
    return int(round(q))


def build_codebook(fov, dtheta, ddtheta, f0: BeamVector) -> Codebook:
    """Steer ``f0`` to every centre ``fov[0] + i dtheta + j ddtheta``."""
    lo, hi = fov
    n_i = _ratio(hi - lo, dtheta, "field of view / dtheta")
    n_j = _ratio(dtheta, ddtheta, "dtheta / ddtheta")
    atoms = [[steer_atom(f0, lo + i * dtheta + j * ddtheta) for j in range(n_j)] for i in range(n_i)]
    return Codebook(atoms, (lo, hi), dtheta, ddtheta, f0)


ATOM_PARAMS = FistaParams(phase="chirp")


def design_codebook(arr: UlaArray, fov=(-np.pi / 4, np.pi / 4), dtheta=np.radians(15),
                    ddtheta=np.radians(5), grid=None, params=ATOM_PARAMS) -> Codebook:
    """Synthesise a ``dtheta``-wide flat-top at boresight and steer it over ``fov``.

    Atoms default to the chirped phase profile: with a linear phase every
    atom shares the same phase centre, and angle information would then
    come from amplitude differences between beams alone.
    """
    grid = grid or AngleGrid.synthesis()
    mask = flat_top_mask(grid, dtheta, default_transition(arr.n_antennas, dtheta, span=2.0))
    return build_codebook(fov, dtheta, ddtheta, synth_fista(mask, arr, params).beam)


STRATEGIES = ("flat_top", "dft", "antenna_selection")


@dataclass(frozen=True)
class ReductionSchedule:
    """``B`` receive matrices ``U_b`` (``N_a x N_rf``) with unit-norm columns."""

    matrices: tuple
    strategy: str
    seed: int | None = None
    labels: tuple = ()

    @property
    def blocks(self) -> int:
        return len(self.matrices)

    @property
    def n_rf(self) -> int:
        return self.matrices[0].shape[1]

    def head(self, B: int) -> "ReductionSchedule":
        """First ``B`` blocks (schedules are built block by block, so this is a prefix)."""
        return ReductionSchedule(self.matrices[:B], self.strategy, self.seed, self.labels[:B])


def coherence(u, v) -> float:
    return float(abs(np.vdot(u, v)) / (np.linalg.norm(u) * np.linalg.norm(v)))


def _coverage_sets(cb: Codebook, level_db=-3.0, step=np.radians(0.25)):
    grid = AngleGrid.uniform(cb.fov[0], cb.fov[1], step)
    out = []
    for _, _, atom in cb.flat():
        p = pattern_of(atom, grid)
        out.append(p >= p.max() * 10 ** (level_db / 20))
    return np.array(out)


def _completable(compatible, chosen, n_rf):
    """True when ``chosen`` extends to ``n_rf`` mutually compatible atoms."""
    if len(chosen) >= n_rf:
        return True
    pool = np.flatnonzero(compatible[:, chosen].all(axis=1))
    pool = pool[pool > max(chosen)] if chosen else pool
    return any(_completable(compatible, chosen + [int(c)], n_rf) for c in pool)


def _worst_pair(C, chosen, compatible):
    """A violating pair to report when no compatible atom is left."""
    if chosen:
        others = [c for c in range(len(C)) if c not in chosen]
        return min(((k, c) for k in chosen for c in others), key=lambda kc: C[kc])
    off = np.where(compatible | np.eye(len(C), dtype=bool), np.inf, C)
    i, j = np.unravel_index(np.argmin(off), C.shape)
    return int(i), int(j)


def build_schedule(cb: Codebook, B: int, n_rf: int, strategy: str, rng,
                   eps_orth: float = 0.1, seed: int | None = None) -> ReductionSchedule:
    """Pseudo-random sequence of ``B`` reduction matrices.

    ``flat_top`` picks codebook atoms greedily, block after block: each pick
    maximises the number of not-yet-covered field-of-view angles (half-power
    footprint), then prefers rarely used atoms, breaks ties at random, and
    keeps every pair inside a block below ``eps_orth`` normalised coherence.
    Once the whole field of view is covered the coverage record restarts.
    A block is only started with atoms that can still be completed to
    ``n_rf`` compatible ones.
    ``dft`` draws unitary DFT columns that point into the field of view,
    cycling through unused ones first. ``antenna_selection`` draws distinct
    identity columns.
    """
    if B < 1 or n_rf < 1:
        raise ConfigurationError("B and n_rf must be positive")
    na = cb.n_antennas
    if n_rf > na:
        raise ConfigurationError(f"n_rf={n_rf} exceeds N_a={na}")
    mats, labels = [], []
    if strategy == "flat_top":
        flat = cb.flat()
        W = unit_columns(np.stack([a.weights for _, _, a in flat], axis=1))
        C = np.abs(W.conj().T @ W)
        cov = _coverage_sets(cb)
        covered = np.zeros(cov.shape[1], dtype=bool)
        used = np.zeros(len(flat))
        compatible = C <= eps_orth
        np.fill_diagonal(compatible, False)
        for _ in range(B):
            if covered.all():
                covered[:] = False
            chosen = []
            for _ in range(n_rf):
                ok = np.array([c not in chosen and compatible[c, chosen].all()
                               and _completable(compatible, chosen + [c], n_rf)
                               for c in range(len(flat))])
                if not ok.any():
                    i, j = _worst_pair(C, chosen, compatible)
                    raise ConfigurationError(
                        f"cannot fit {n_rf} atoms with coherence <= {eps_orth}: atoms "
                        f"{flat[i][0]} and {flat[j][0]} overlap with coherence {C[i, j]:.3f}")
                gain = (cov & ~covered).sum(axis=1) + 1.0 / (1.0 + used)
                gain = np.where(ok, gain, -np.inf)
                best = np.flatnonzero(gain == gain.max())
                c = int(best[rng.integers(len(best))])
                chosen.append(c)
                covered |= cov[c]
                used[c] += 1
            mats.append(W[:, chosen])
            labels.append(tuple(flat[c][0] for c in chosen))
    elif strategy == "dft":
        n = np.arange(na)
        ks = np.arange(-(na // 2), na - na // 2)
        s = 2 * ks / na
        inside = (s >= np.sin(cb.fov[0]) - 1e-12) & (s <= np.sin(cb.fov[1]) + 1e-12)
        ks = ks[inside]
        if n_rf > len(ks):
            raise ConfigurationError(f"only {len(ks)} DFT beams point into the field of view")
        D = np.exp(2j * np.pi * np.outer(n, ks) / na) / np.sqrt(na)
        used = np.zeros(len(ks), dtype=bool)
        for _ in range(B):
            chosen = []
            for _ in range(n_rf):
                pool = [c for c in range(len(ks)) if c not in chosen and not used[c]]
                if not pool:
                    used[:] = False
                    used[chosen] = True
                    pool = [c for c in range(len(ks)) if c not in chosen]
                c = pool[rng.integers(len(pool))]
                chosen.append(c)
                used[c] = True
            mats.append(D[:, chosen])
            labels.append(tuple(int(ks[c]) for c in chosen))
    elif strategy == "antenna_selection":
        I = np.eye(na, dtype=complex)
        for _ in range(B):
            chosen = sorted(rng.choice(na, size=n_rf, replace=False).tolist())
            mats.append(I[:, chosen])
            labels.append(tuple(chosen))
    else:
        raise ConfigurationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return ReductionSchedule(tuple(mats), strategy, seed, tuple(labels))


def fully_digital(n_antennas: int) -> ReductionSchedule:
    """Single block observing every antenna (``U = I``)."""
    return ReductionSchedule((np.eye(n_antennas, dtype=complex),), "fully_digital")


def pattern_csv(f, grid: AngleGrid) -> str:
    """``angle_deg,magnitude_db`` rows of the pattern on ``grid``."""
    p = pattern_of(f, grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["angle_deg", "magnitude_db"])
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(p)
    for th, v in zip(np.degrees(grid.points), db):
        w.writerow([f"{th:.6f}", f"{v:.6f}"])
    return buf.getvalue()

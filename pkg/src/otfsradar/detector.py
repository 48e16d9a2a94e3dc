"""Discovery-mode detection: GLRT map, OS-CFAR threshold, local refinement, SIC loop.

All routines take an :class:`~otfsradar.channel.ObservationModel`, which
bundles the OTFS grid, array, receive schedule, transmit beams and the known
symbols of every block, plus the stacked received vectors ``y`` of shape
``(B, N_rf * NM)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ObservationModel
from .errors import ConfigurationError

_UNSEARCHABLE = 1e-12


@dataclass(frozen=True)
class SearchGrid:
    """Doppler (Hz), delay (s) and angle (rad) points of the coarse search."""

    doppler: np.ndarray
    delay: np.ndarray
    angle: np.ndarray

    @classmethod
    def coarse(cls, cfg, fov=(-np.pi / 4, np.pi / 4), angle_step=np.radians(1.0)):
        """OTFS lattice in Doppler (signed, ``k = -N/2 .. N/2 - 1``) and delay, uniform angles."""
        k = np.arange(-(cfg.N // 2), cfg.N - cfg.N // 2)
        n = int(np.floor((fov[1] - fov[0]) / angle_step + 1e-9)) + 1
        return cls(k * cfg.doppler_step, np.arange(cfg.M) * cfg.delay_step,
                   fov[0] + angle_step * np.arange(n))

    @property
    def shape(self):
        return (len(self.doppler), len(self.delay), len(self.angle))

    def steps(self):
        return tuple(float(v[1] - v[0]) if len(v) > 1 else 0.0
                     for v in (self.doppler, self.delay, self.angle))

    def point(self, idx):
        i, j, k = idx
        return float(self.doppler[i]), float(self.delay[j]), float(self.angle[k])


@dataclass
class LikelihoodMap:
    """GLRT statistic over a search grid.

    ``values`` holds ``S``; ``numer`` the complex correlations
    ``sum_b y_b^H G_b x_b``; ``denom`` the energies ``sum_b ||G_b x_b||^2``.
    Cells whose energy vanishes are flagged in ``valid`` and carry ``S = 0``.
    """

    grid: SearchGrid
    values: np.ndarray
    numer: np.ndarray
    denom: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True)
class CfarConfig:
    """Ordered-statistic CFAR window.

    Attributes
    ----------
    window, guard : tuple of int
        Half-widths per dimension (Doppler, delay, angle). The training
        cells are the window minus the guard box.
    kappa : float
        Percentile of the sorted training cells.
    alpha : float
        Threshold scale.
    min_neighbors : int
        Cells with fewer valid training cells are never declared.
    """

    window: tuple = (3, 3, 3)
    guard: tuple = (1, 1, 1)
    kappa: float = 0.75
    alpha: float = 3.3
    min_neighbors: int = 8

    def __post_init__(self):
        if len(self.window) != 3 or len(self.guard) != 3:
            raise ConfigurationError("window and guard need three half-widths")
        if any(g >= w or g < 0 for w, g in zip(self.window, self.guard)):
            raise ConfigurationError("window must strictly contain the guard region")
        if not 0 < self.kappa < 1:
            raise ConfigurationError("kappa must lie in (0, 1)")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")
        if self.n_neighbors < self.min_neighbors:
            raise ConfigurationError(f"window has only {self.n_neighbors} training cells")

    @property
    def offsets(self) -> np.ndarray:
        ranges = [np.arange(-w, w + 1) for w in self.window]
        d = np.stack(np.meshgrid(*ranges, indexing="ij"), -1).reshape(-1, 3)
        inner = np.all(np.abs(d) <= np.array(self.guard), axis=1)
        return d[~inner]

    @property
    def n_neighbors(self) -> int:
        return int(np.prod([2 * w + 1 for w in self.window]) - np.prod([2 * g + 1 for g in self.guard]))


@dataclass
class Detection:
    """One detected scatterer.

    ``coarse`` and ``refined`` are ``(nu, tau, phi)`` triples; ``cell`` the
    coarse grid index.
    """

    order: int
    cell: tuple
    coarse: tuple
    refined: tuple
    gain: complex
    statistic: float
    coarse_statistic: float
    threshold: float = field(default=np.nan)

    def to_record(self, trial=None):
        nu, tau, phi = self.refined
        rec = {"order": self.order, "cell": [int(c) for c in self.cell],
               "coarse": [float(v) for v in self.coarse],
               "doppler_hz": float(nu), "delay_s": float(tau), "aoa_rad": float(phi),
               "gain_re": float(np.real(self.gain)), "gain_im": float(np.imag(self.gain)),
               "statistic": float(self.statistic)}
        if trial is not None:
            rec["trial"] = int(trial)
        return rec


def _stat(num, den):
    ok = den > _UNSEARCHABLE * max(float(np.max(den)), 1e-300)
    S = np.where(ok, np.abs(num) ** 2 / np.where(ok, den, 1.0), 0.0)
    return S, ok


def glrt_statistic(model: ObservationModel, y, point) -> float:
    """``|sum_b y_b^H G_b x_b|^2 / sum_b ||G_b x_b||^2`` at ``point = (nu, tau, phi)``.

    Returns ``nan`` when the hypothesised signal has zero energy.
    """
    nu, tau, phi = point
    num, den = model.correlate(y, nu, tau, [phi])
    if not den[0] > 0:
        return float("nan")
    return float(abs(num[0]) ** 2 / den[0])


def estimate_gain(model: ObservationModel, y, point) -> complex:
    """Least-squares gain ``(sum_b y_b^H G_b x_b)^* / sum_b ||G_b x_b||^2``."""
    nu, tau, phi = point
    num, den = model.correlate(y, nu, tau, [phi])
    if not den[0] > 0:
        return complex("nan")
    return complex(np.conj(num[0]) / den[0])


def build_likelihood_map(model: ObservationModel, y, grid: SearchGrid) -> LikelihoodMap:
    """Evaluate the GLRT statistic at every grid cell."""
    if 0 in grid.shape:
        raise ConfigurationError("search grid is empty")
    factors = model.angle_factors(grid.angle)
    num = np.empty(grid.shape, dtype=complex)
    den = np.empty(grid.shape)
    for i, nu in enumerate(grid.doppler):
        for j, tau in enumerate(grid.delay):
            num[i, j], den[i, j] = model.correlate(y, nu, tau, grid.angle, factors)
    S, ok = _stat(num, den)
    return LikelihoodMap(grid, S, num, den, ok)


def _neighbor_stack(values, valid, cfg: CfarConfig):
    w = cfg.window
    pad = np.pad(np.where(valid, values, np.nan), [(k, k) for k in w], constant_values=np.nan)
    sh = values.shape
    views = [pad[w[0] + a:w[0] + a + sh[0], w[1] + b:w[1] + b + sh[1], w[2] + c:w[2] + c + sh[2]]
             for a, b, c in cfg.offsets]
    return np.stack(views)


def os_cfar_threshold(lmap: LikelihoodMap, cfg: CfarConfig) -> np.ndarray:
    """Per-cell threshold ``alpha * S_(ceil(kappa * N_c))`` over the training cells.

    Training windows are truncated at the map boundary and skip unsearchable
    cells, so ``N_c`` varies per cell. Cells with fewer than
    ``min_neighbors`` training cells, and unsearchable cells, get ``inf``.
    """
    return cfg.alpha * cfar_base(lmap, cfg)


def cfar_base(lmap: LikelihoodMap, cfg: CfarConfig) -> np.ndarray:
    """Order statistic before the ``alpha`` scaling (``inf`` where excluded)."""
    stack = np.sort(_neighbor_stack(lmap.values, lmap.valid, cfg), axis=0)
    n_c = np.sum(~np.isnan(stack), axis=0)
    rank = np.clip(np.ceil(cfg.kappa * n_c).astype(int) - 1, 0, stack.shape[0] - 1)
    base = np.take_along_axis(stack, rank[None], axis=0)[0]
    ok = lmap.valid & (n_c >= cfg.min_neighbors)
    return np.where(ok, base, np.inf)


def above_threshold_set(lmap: LikelihoodMap, thresholds) -> list:
    """Cells with ``S >= T`` and ``S > 0``, as index triples in lexicographic order."""
    hit = (lmap.values >= thresholds) & np.isfinite(thresholds) & (lmap.values > 0)
    return [tuple(int(v) for v in idx) for idx in np.argwhere(hit)]


def _fine_axis(center, step, factor, lo, hi):
    pts = center + step * np.arange(-factor, factor + 1) / factor
    return pts[(pts >= lo - 1e-15) & (pts <= hi + 1e-15)]


def refine_local(model: ObservationModel, y, coarse, steps, refine_factor=10, levels=1,
                 bounds=None):
    """Fine-grid argmax of ``S`` around a coarse point.

    Each level scans ``+-1`` step per dimension with ``refine_factor``
    subdivisions, then recentres on the best point with the step divided by
    ``refine_factor``. The coarse point belongs to every level's grid, so
    the returned statistic never falls below its value.

    Parameters
    ----------
    coarse : tuple
        ``(nu, tau, phi)`` starting point.
    steps : tuple
        Coarse spacing per dimension.
    bounds : tuple of pairs, optional
        Admissible range per dimension; defaults to the domain of the
        crosstalk model and the angle range ``[-pi/2, pi/2]``.

    Returns
    -------
    point : tuple
        Refined ``(nu, tau, phi)``.
    statistic : float
    """
    cfg = model.cfg
    if bounds is None:
        bounds = ((-cfg.M * cfg.delta_f * 0.999, cfg.M * cfg.delta_f * 0.999),
                  (0.0, cfg.N * cfg.T * 0.999), (-np.pi / 2, np.pi / 2))
    best = tuple(float(v) for v in coarse)
    best_s = glrt_statistic(model, y, best)
    steps = list(steps)
    for _ in range(levels):
        axes = [_fine_axis(best[d], steps[d], refine_factor, *bounds[d]) for d in range(3)]
        factors = model.angle_factors(axes[2])
        cand_s, cand = best_s, best
        for nu in axes[0]:
            for tau in axes[1]:
                num, den = model.correlate(y, nu, tau, axes[2], factors)
                S, ok = _stat(num, den)
                k = int(np.argmax(S))
                if ok[k] and S[k] > cand_s:
                    cand_s, cand = float(S[k]), (float(nu), float(tau), float(axes[2][k]))
        best, best_s = cand, cand_s
        steps = [s / refine_factor for s in steps]
    return best, best_s


def sic_cancel(model: ObservationModel, y, det: Detection):
    """Remove ``h G_b(nu, tau, phi) x_b`` of a detection from every block."""
    return np.asarray(y) - det.gain * model.signal(*det.refined)


@dataclass(frozen=True)
class DetectionLimits:
    """Loop limits: at most ``max_detections``; refinement settings."""

    max_detections: int | None = None
    refine_factor: int = 10
    levels: int = 1


def detect_all(model: ObservationModel, y, grid: SearchGrid, cfar: CfarConfig,
               limits: DetectionLimits = DetectionLimits()) -> list:
    """Sequential detect, refine, estimate and cancel loop.

    Stops when no cell clears its threshold or after ``max_detections``
    (default: the number of RF chains). Ties in the coarse argmax go to the
    lowest lexicographic ``(Doppler, delay, angle)`` index.
    """
    max_det = model.n_rf if limits.max_detections is None else limits.max_detections
    steps = grid.steps()
    out = []
    y = np.array(y, dtype=complex)
    for order in range(max_det):
        lmap = build_likelihood_map(model, y, grid)
        T = os_cfar_threshold(lmap, cfar)
        hit = (lmap.values >= T) & np.isfinite(T) & (lmap.values > 0)
        if not hit.any():
            break
        masked = np.where(hit, lmap.values, -np.inf)
        cell = np.unravel_index(int(np.argmax(masked)), grid.shape)
        coarse = grid.point(cell)
        refined, s = refine_local(model, y, coarse, steps, limits.refine_factor, limits.levels)
        det = Detection(order, tuple(int(c) for c in cell), coarse, refined,
                        estimate_gain(model, y, refined), s, float(lmap.values[cell]), float(T[cell]))
        out.append(det)
        y = sic_cancel(model, y, det)
    return out

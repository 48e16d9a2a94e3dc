"""Monte Carlo experiments: beam synthesis, CFAR calibration, Discovery, Tracking, CRLB.

Every trial draws from its own seed sequence ``(seed, trial, stream)``, so a
row depends only on the configuration and its trial index. Running trials in
another order, or in worker processes, gives the same rows. Results are
returned as :class:`ResultTable` objects and written with a metadata header.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy import stats

from .beamforming import (AngleGrid, FistaParams, beam_metrics, build_schedule, default_transition,
                          design_codebook, flat_top_mask, pattern_csv, physical_beams, steer_atom,
                          synth_fista, fully_digital)
from .channel import (SPEED_OF_LIGHT, ObservationModel, Scenario, Target, noiseless_rx,
                      path_gain_sq, radar_snr)
from .crlb import ParamVector, SignalModel, crlb, fisher_matrix
from .detector import DetectionLimits, SearchGrid, build_likelihood_map, cfar_base, detect_all
from .errors import CalibrationError, ConfigurationError, SingularFisherError
from .estimator import TrackedUser, check_isolation, estimate_all, zero_forcing_beams
from .otfs import LatticePsiSource, generate_symbols
from .scenario import (STREAM_NOISE, STREAM_SYMBOLS, STREAM_TARGETS, STREAM_VALIDATE,
                       ExperimentConfig, trial_rng)

CSV_FORMAT = 1


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass
class ResultTable:
    """Rows with a fixed column order plus a metadata header.

    ``meta`` always carries the package version, the master seed and the
    config digest; ``summary`` holds aggregated rows (for example P_d per
    range bin) with their own columns.
    """

    kind: str
    columns: list
    rows: list
    meta: dict
    summary_columns: list = field(default_factory=list)
    summary: list = field(default_factory=list)

    def header_lines(self):
        keys = ["tool", "version", "format", "kind", "profile", "seed", "trials", "config_digest"]
        return [f"# {k}: {self.meta[k]}" for k in keys if k in self.meta]

    @staticmethod
    def _fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        return str(v)

    def _csv(self, columns, rows):
        buf = io.StringIO()
        buf.write("\n".join(self.header_lines()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([self._fmt(r[c]) for c in columns])
        return buf.getvalue()

    def to_csv(self) -> str:
        return self._csv(self.columns, self.rows)

    def summary_csv(self) -> str:
        return self._csv(self.summary_columns, self.summary)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, (np.floating, float)):
                return float(v)
            if isinstance(v, (np.integer, np.bool_)):
                return int(v)
            return v
        doc = {"meta": self.meta, "columns": self.columns,
               "rows": [{c: clean(r[c]) for c in self.columns} for r in self.rows],
               "summary": [{c: clean(r[c]) for c in self.summary_columns} for r in self.summary]}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def write(self, out_dir, stem=None):
        """Write ``<stem>.csv``, ``<stem>_summary.csv`` (if any) and ``<stem>.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.kind
        paths = [out / f"{stem}.csv", out / f"{stem}.json"]
        paths[0].write_text(self.to_csv())
        paths[1].write_text(self.to_json())
        if self.summary_columns:
            p = out / f"{stem}_summary.csv"
            p.write_text(self.summary_csv())
            paths.append(p)
        return paths


def _meta(exp: ExperimentConfig, kind: str, **extra) -> dict:
    m = {"tool": "otfsradar", "version": package_version(), "format": CSV_FORMAT, "kind": kind,
         "profile": exp.profile, "seed": exp.seed, "trials": exp.trials, "config_digest": exp.digest}
    m.update(extra)
    return m


def run_trials(fn, ctx, trials, order=None, workers=1):
    """Apply ``fn(ctx, trial)`` to every trial and return the rows sorted by trial.

    ``order`` permutes execution (rows are unaffected); ``workers > 1`` uses a
    process pool.
    """
    idx = list(range(trials)) if order is None else [int(t) for t in order]
    if sorted(idx) != list(range(trials)):
        raise ConfigurationError("order must be a permutation of the trial indices")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(fn, [ctx] * len(idx), idx))
    else:
        chunks = [fn(ctx, t) for t in idx]
    rows = [r for chunk in chunks for r in chunk]
    return sorted(rows, key=lambda r: (r["trial"],) + tuple(r.get(k, 0) for k in ("B", "range_m", "user")))


# -- shared designs -------------------------------------------------------

@lru_cache(maxsize=8)
def _tx_design(n_antennas, G, fov):
    from .channel import UlaArray
    arr = UlaArray(n_antennas)
    grid = AngleGrid.synthesis(G)
    width = fov[1] - fov[0]
    mask = flat_top_mask(grid, width, default_transition(n_antennas, width))
    res = synth_fista(mask, arr, FistaParams())
    centre = 0.5 * (fov[0] + fov[1])
    beam = steer_atom(res.beam, centre) if abs(centre) > 0 else res.beam
    return res, mask, beam


@lru_cache(maxsize=8)
def _codebook(n_antennas, G, fov, dtheta, ddtheta):
    from .channel import UlaArray
    return design_codebook(UlaArray(n_antennas), fov, dtheta, ddtheta, AngleGrid.synthesis(G))


def tx_beam(exp: ExperimentConfig):
    """Wide Discovery beam covering the field of view (unit Euclidean norm)."""
    _, _, beam = _tx_design(exp.array.n_antennas, exp.doc["codebook"]["synthesis_points"], exp.fov)
    return physical_beams([beam])[:, 0]


def codebook(exp: ExperimentConfig):
    cb = exp.doc["codebook"]
    return _codebook(exp.array.n_antennas, cb["synthesis_points"], exp.fov,
                     np.radians(cb["dtheta_deg"]), np.radians(cb["ddtheta_deg"]))


def schedule(exp: ExperimentConfig, B: int, strategy: str | None = None, draw: int | None = None):
    """Receive schedule from the scenario's strategy and schedule seed.

    ``draw`` selects an independent schedule realisation (used to average
    over the randomness of the strategies).
    """
    strategy = strategy or exp.doc["schedule"]["strategy"]
    seed = exp.doc["schedule"]["seed"]
    ss = np.random.SeedSequence(seed) if draw is None else np.random.SeedSequence(seed, spawn_key=(draw,))
    rng = np.random.default_rng(ss)
    return build_schedule(codebook(exp), B, exp.n_rf, strategy, rng,
                          exp.doc["codebook"]["eps_orth"], seed)


def search_grid(exp: ExperimentConfig) -> SearchGrid:
    return SearchGrid.coarse(exp.otfs, exp.fov, np.radians(exp.doc["search"]["angle_step_deg"]))


_PSI_SOURCES = {}


def psi_source(cfg, refine_factor):
    """Per-process crosstalk cache on the coarse lattice and the first refinement lattice."""
    key = (cfg.N, cfg.M, cfg.delta_f, refine_factor)
    if key not in _PSI_SOURCES:
        steps = [(cfg.doppler_step, cfg.delay_step),
                 (cfg.doppler_step / refine_factor, cfg.delay_step / refine_factor)]
        _PSI_SOURCES[key] = LatticePsiSource(cfg, steps, maxsize=[4 * cfg.size, 2048])
    return _PSI_SOURCES[key]


def _noise(rng, shape, sigma2):
    return np.sqrt(sigma2 / 2) * (rng.standard_normal(shape + (2,)) @ np.array([1.0, 1j]))


# -- synth-beams ----------------------------------------------------------

def synth_beams(exp: ExperimentConfig, out_dir=None) -> dict:
    """Synthesise the Tx beam, codebook atoms and schedules; optionally write artefacts.

    Returns a report dict with the Tx beam metrics and the schedule labels.
    """
    na = exp.array.n_antennas
    G = exp.doc["codebook"]["synthesis_points"]
    res, mask, beam = _tx_design(na, G, exp.fov)
    ripple, sll = beam_metrics(res.beam, mask)
    cb = codebook(exp)
    fine = AngleGrid.uniform(-np.pi / 2, np.pi / 2, np.radians(0.25))
    schedules = {}
    for strategy in ("flat_top", "dft", "antenna_selection"):
        for B in exp.blocks:
            sch = schedule(exp, B, strategy)
            schedules[f"{strategy}/B={B}"] = [[list(map(_jsonable, lab)) if isinstance(lab, tuple)
                                               else _jsonable(lab) for lab in blk] for blk in sch.labels]
    report = {"meta": _meta(exp, "synth-beams"),
              "tx_beam": {"ripple_db": ripple, "sll_db": sll, "grid_power": beam.grid_power(),
                          "iterations": res.iterations, "converged": bool(res.converged),
                          "max_objective_increase": float(max(b - a for a, b in res.checkpoints))},
              "codebook": json.loads(cb.manifest()),
              "schedules": schedules}
    if out_dir is not None:
        out = Path(out_dir)
        (out / "atoms").mkdir(parents=True, exist_ok=True)
        header = "\n".join(f"# {k}: {v}" for k, v in report["meta"].items()) + "\n"
        (out / "tx_beam.csv").write_text(header + pattern_csv(beam, fine))
        for (i, j), _, atom in cb.flat():
            (out / "atoms" / f"atom_{i}_{j}.csv").write_text(header + pattern_csv(atom, fine))
        (out / "codebook_manifest.json").write_text(cb.manifest() + "\n")
        (out / "synth_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


# -- CFAR calibration -----------------------------------------------------

@dataclass
class CalibrationResult:
    kappa: float
    alpha: float
    target_pfa: float
    calibration_pfa: float
    validation_pfa: float
    calibration_cells: int
    validation_cells: int


def _h0_ratios(exp: ExperimentConfig, maps: int, stream: int, B: int):
    """``S / base`` over every CFAR-eligible cell of ``maps`` noise-only maps."""
    cfg, sigma2 = exp.otfs, exp.link.noise_var
    grid = search_grid(exp)
    sch = schedule(exp, B)
    f = tx_beam(exp)
    src = psi_source(cfg, exp.doc["search"]["refine_factor"])
    base_cfg = exp.cfar
    out = []
    for m in range(maps):
        rs = trial_rng(exp.seed, m, stream)
        x = generate_symbols(cfg, 1, exp.link.p_avg, rs, blocks=B)
        y = _noise(rs, (B, exp.n_rf * cfg.size), sigma2)
        model = ObservationModel(cfg, exp.array, sch, f, x, src)
        lmap = build_likelihood_map(model, y, grid)
        base = cfar_base(lmap, base_cfg)
        ok = np.isfinite(base) & (base > 0)
        out.append(lmap.values[ok] / base[ok])
    return np.concatenate(out)


def h0_statistics(exp: ExperimentConfig, maps: int, B: int | None = None, stream: int = STREAM_NOISE):
    """Raw GLRT map values under H0 (for distribution checks)."""
    cfg, sigma2 = exp.otfs, exp.link.noise_var
    B = B or max(exp.blocks)
    grid = search_grid(exp)
    sch, f = schedule(exp, B), tx_beam(exp)
    src = psi_source(cfg, exp.doc["search"]["refine_factor"])
    vals = []
    for m in range(maps):
        rs = trial_rng(exp.seed, m, stream)
        x = generate_symbols(cfg, 1, exp.link.p_avg, rs, blocks=B)
        y = _noise(rs, (B, exp.n_rf * cfg.size), sigma2)
        lmap = build_likelihood_map(ObservationModel(cfg, exp.array, sch, f, x, src), y, grid)
        vals.append(lmap.values[lmap.valid])
    return np.concatenate(vals)


def h0_cell_draws(exp: ExperimentConfig, draws: int, B: int | None = None,
                  stream: int = STREAM_VALIDATE) -> np.ndarray:
    """``S / sigma^2`` at one random grid cell of each of ``draws`` noise-only frames.

    Cells of one map share noise and are correlated; one cell per frame
    gives independent samples, which are ``Exp(1)`` under H0.
    """
    cfg, sigma2 = exp.otfs, exp.link.noise_var
    B = B or max(exp.blocks)
    grid = search_grid(exp)
    sch, f = schedule(exp, B), tx_beam(exp)
    src = psi_source(cfg, exp.doc["search"]["refine_factor"])
    out = np.empty(draws)
    for d in range(draws):
        rs = trial_rng(exp.seed, d, stream)
        x = generate_symbols(cfg, 1, exp.link.p_avg, rs, blocks=B)
        y = _noise(rs, (B, exp.n_rf * cfg.size), sigma2)
        cell = tuple(int(rs.integers(n)) for n in grid.shape)
        nu, tau, phi = grid.point(cell)
        num, den = ObservationModel(cfg, exp.array, sch, f, x, src).correlate(y, nu, tau, [phi])
        out[d] = abs(num[0]) ** 2 / den[0] / sigma2
    return out


def measured_pfa(ratios, alpha) -> float:
    return float(np.mean(ratios >= alpha))


def calibrate_cfar(exp: ExperimentConfig, target_pfa: float | None = None, B: int | None = None,
                   tol: float = 0.25) -> CalibrationResult:
    """Fix ``kappa`` and bisect ``alpha`` on noise-only maps.

    The H0 ratios ``S / S_(ceil(kappa N_c))`` are computed once; the false
    alarm rate at a given ``alpha`` is the fraction of ratios at or above it.
    The result is then checked on fresh maps from an independent stream.

    Raises
    ------
    CalibrationError
        If the target is outside the rates reachable within
        ``cfar.alpha_bounds``, or either measured rate misses the target by
        more than ``tol`` (relative).
    """
    c = exp.doc["cfar"]
    target = c["target_pfa"] if target_pfa is None else float(target_pfa)
    if not 0 < target < 0.5:
        raise ConfigurationError("target_pfa must lie in (0, 0.5)")
    B = B or max(exp.blocks)
    ratios = _h0_ratios(exp, c["calibration_maps"], STREAM_NOISE, B)
    lo, hi = c["alpha_bounds"]
    p_lo, p_hi = measured_pfa(ratios, lo), measured_pfa(ratios, hi)
    if not p_hi <= target <= p_lo:
        raise CalibrationError(f"target P_fa {target} outside the reachable range [{p_hi:.3g}, {p_lo:.3g}] "
                               f"for alpha in [{lo}, {hi}]", (p_hi, p_lo))
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if measured_pfa(ratios, mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-9 * hi:
            break
    alpha = hi
    p_cal = measured_pfa(ratios, alpha)
    val = _h0_ratios(exp, c["validation_maps"], STREAM_VALIDATE, B)
    p_val = measured_pfa(val, alpha)
    for name, p in (("calibration", p_cal), ("validation", p_val)):
        if abs(p - target) > tol * target:
            raise CalibrationError(f"{name} P_fa {p:.4g} misses target {target} by more than {tol:.0%}",
                                   (p, p))
    return CalibrationResult(c["kappa"], float(alpha), target, p_cal, p_val, int(ratios.size), int(val.size))


def calibration_table(exp: ExperimentConfig, res: CalibrationResult) -> ResultTable:
    row = {k: getattr(res, k) for k in ("kappa", "alpha", "target_pfa", "calibration_pfa",
                                        "validation_pfa", "calibration_cells", "validation_cells")}
    row["trial"] = 0
    cols = ["kappa", "alpha", "target_pfa", "calibration_pfa", "validation_pfa",
            "calibration_cells", "validation_cells"]
    return ResultTable("calibrate-cfar", cols, [row], _meta(exp, "calibrate-cfar"))


# -- Discovery ------------------------------------------------------------

def _allowed_aoa(u, lo, hi, excluded, sep):
    """Map ``u`` in [0, 1) onto ``[lo, hi]`` minus ``sep``-neighbourhoods of ``excluded``."""
    segs = [(lo, hi)]
    for e in excluded:
        nxt = []
        for a, b in segs:
            if e - sep > a:
                nxt.append((a, min(b, e - sep)))
            if e + sep < b:
                nxt.append((max(a, e + sep), b))
        segs = [(a, b) for a, b in nxt if b > a]
    if not segs:
        raise ConfigurationError("$.discovery.min_separation_deg leaves no admissible angle")
    lens = np.array([b - a for a, b in segs])
    t = u * lens.sum()
    k = int(np.searchsorted(np.cumsum(lens), t, side="right"))
    k = min(k, len(segs) - 1)
    return segs[k][0] + t - (np.cumsum(lens)[k] - lens[k])


def discovery_context(exp: ExperimentConfig, noiseless=False) -> dict:
    d = exp.doc["discovery"]
    s = exp.doc["search"]
    return {"exp": exp, "grid": search_grid(exp), "tx": tx_beam(exp),
            "schedules": {B: schedule(exp, B) for B in exp.blocks},
            "limits": DetectionLimits(d.get("max_detections"), s["refine_factor"], s["levels"]),
            "noiseless": noiseless}


def discovery_trial(ctx, trial):
    """Rows for one trial: every range bin and block count with common random numbers."""
    exp = ctx["exp"]
    cfg, link, arr = exp.otfs, exp.link, exp.array
    d = exp.doc["discovery"]
    Bmax = max(exp.blocks)
    rt = trial_rng(exp.seed, trial, STREAM_TARGETS)
    x = generate_symbols(cfg, 1, link.p_avg, trial_rng(exp.seed, trial, STREAM_SYMBOLS), blocks=Bmax)
    w = _noise(trial_rng(exp.seed, trial, STREAM_NOISE), (Bmax, exp.n_rf * cfg.size), link.noise_var)
    src = psi_source(cfg, exp.doc["search"]["refine_factor"])
    inter_deg = [t["aoa_deg"] for t in d["interferers"]]
    tol = np.radians(d["aoa_tol_deg"])
    rows = []
    for ri, r in enumerate(d["ranges_m"]):
        u_aoa, u_vel, u_ph = rt.random(3)
        aoa = np.radians(_allowed_aoa(u_aoa, *d["aoa_deg"], inter_deg, d["min_separation_deg"]))
        vel = d["velocity_mps"][0] + u_vel * (d["velocity_mps"][1] - d["velocity_mps"][0])
        nu, tau = exp.kinematics(r, vel)
        gain = np.sqrt(path_gain_sq(link, r)) * np.exp(2j * np.pi * u_ph)
        targets = [Target(complex(gain), nu, tau, float(aoa))]
        for it in d["interferers"]:
            vi = it.get("velocity_mps", 0.0)
            nui, taui = exp.kinematics(it["range_m"], vi)
            lk = link if "rcs_m2" not in it else _with_rcs(link, it["rcs_m2"])
            gi = np.sqrt(path_gain_sq(lk, it["range_m"])) * np.exp(2j * np.pi * rt.random())
            targets.append(Target(complex(gi), nui, taui, float(np.radians(it["aoa_deg"]))))
        for B in exp.blocks:
            sch = ctx["schedules"][B]
            sc = Scenario(cfg, link, arr, ctx["tx"], sch, targets)
            y = noiseless_rx(sc, x[:B])
            if not ctx["noiseless"]:
                y = y + w[:B]
            model = ObservationModel(cfg, arr, sch, ctx["tx"], x[:B], src)
            dets = detect_all(model, y, ctx["grid"], exp.cfar, ctx["limits"])
            errs = [abs(det.refined[2] - aoa) for det in dets]
            best = min(errs) if errs else np.inf
            inter_hits = sum(any(abs(det.refined[2] - t.aoa) <= tol for det in dets) for t in targets[1:])
            rows.append({"trial": trial, "B": B, "range_m": float(r), "aoa_deg": float(np.degrees(aoa)),
                         "velocity_mps": float(vel), "snr_db": float(10 * np.log10(radar_snr(link, r))),
                         "detected": bool(best <= tol), "n_detections": len(dets),
                         "aoa_error_deg": float(np.degrees(best)) if errs else float("nan"),
                         "interferers_detected": int(inter_hits)})
    return rows


def _with_rcs(link, rcs):
    from dataclasses import replace
    return replace(link, sigma_rcs=rcs)


def wilson(k, n, z=1.959963984540054):
    """Wilson score interval for ``k`` successes in ``n`` trials."""
    if n == 0:
        return (float("nan"), float("nan"))
    p = k / n
    den = 1 + z * z / n
    c = (p + z * z / (2 * n)) / den
    h = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (float(c - h), float(c + h))


DISCOVERY_COLUMNS = ["trial", "B", "range_m", "aoa_deg", "velocity_mps", "snr_db", "detected",
                     "n_detections", "aoa_error_deg", "interferers_detected"]
DISCOVERY_SUMMARY = ["B", "range_m", "snr_db", "trials", "detections", "p_d", "ci_low", "ci_high",
                     "mean_detections"]


def run_discovery(exp: ExperimentConfig, order=None, workers=1, noiseless=False) -> ResultTable:
    """Detection probability per range bin and block count.

    A target counts as detected when some detection's refined angle lies
    within ``discovery.aoa_tol_deg`` of the truth.
    """
    ctx = discovery_context(exp, noiseless)
    rows = run_trials(discovery_trial, ctx, exp.trials, order, workers)
    summary = []
    for B in exp.blocks:
        for r in exp.doc["discovery"]["ranges_m"]:
            sel = [row for row in rows if row["B"] == B and row["range_m"] == r]
            k = sum(row["detected"] for row in sel)
            lo, hi = wilson(k, len(sel))
            summary.append({"B": B, "range_m": float(r), "snr_db": sel[0]["snr_db"], "trials": len(sel),
                            "detections": k, "p_d": k / len(sel), "ci_low": lo, "ci_high": hi,
                            "mean_detections": float(np.mean([row["n_detections"] for row in sel]))})
    return ResultTable("discover", DISCOVERY_COLUMNS, rows, _meta(exp, "discover"),
                       DISCOVERY_SUMMARY, summary)


def false_alarm_trial(ctx, trial):
    """Detections on a noise-only frame."""
    exp = ctx["exp"]
    cfg, link = exp.otfs, exp.link
    B = max(exp.blocks)
    x = generate_symbols(cfg, 1, link.p_avg, trial_rng(exp.seed, trial, STREAM_SYMBOLS), blocks=B)
    y = _noise(trial_rng(exp.seed, trial, STREAM_NOISE), (B, exp.n_rf * cfg.size), link.noise_var)
    model = ObservationModel(cfg, exp.array, ctx["schedules"][B], ctx["tx"], x,
                             psi_source(cfg, exp.doc["search"]["refine_factor"]))
    return [{"trial": trial, "B": B, "n_detections": len(detect_all(model, y, ctx["grid"], exp.cfar,
                                                                   ctx["limits"]))}]


# -- Tracking -------------------------------------------------------------

def tracking_context(exp: ExperimentConfig, noiseless=False) -> dict:
    t = exp.doc["tracking"]
    arr = exp.array
    users = t["users"]
    angles = np.radians([u["aoa_deg"] for u in users])
    F = zero_forcing_beams(arr, angles)
    kin = [exp.kinematics(u["range_m"], u.get("velocity_mps", 0.0)) for u in users]
    protos = [TrackedUser(p, (nu, tau, float(angles[p])), F[:, p], None)
              for p, (nu, tau) in enumerate(kin)]
    check_isolation(protos, arr, t["isolation_tol"])
    sch = schedule(exp, t["blocks"])
    grid = search_grid(exp)
    steps = grid.steps()
    priors = []
    for nu, tau, phi in (pr.prior for pr in protos):
        priors.append((float(grid.doppler[np.argmin(abs(grid.doppler - nu))]),
                       float(grid.delay[np.argmin(abs(grid.delay - tau))]),
                       float(grid.angle[np.argmin(abs(grid.angle - phi))])))
    amps = [np.sqrt(path_gain_sq(_with_rcs(exp.link, u["rcs_m2"]) if "rcs_m2" in u else exp.link,
                                 u["range_m"])) for u in users]
    return {"exp": exp, "F": F, "kin": kin, "angles": angles, "schedule": sch, "steps": steps,
            "priors": priors, "amps": amps, "noiseless": noiseless}


def tracking_trial(ctx, trial):
    exp = ctx["exp"]
    cfg, link, arr = exp.otfs, exp.link, exp.array
    t = exp.doc["tracking"]
    P = len(ctx["kin"])
    B = t["blocks"]
    rt = trial_rng(exp.seed, trial, STREAM_TARGETS)
    phases = rt.random(P)
    targets = [Target(complex(a * np.exp(2j * np.pi * ph)), nu, tau, float(phi))
               for a, ph, (nu, tau), phi in zip(ctx["amps"], phases, ctx["kin"], ctx["angles"])]
    x = generate_symbols(cfg, P, link.p_avg, trial_rng(exp.seed, trial, STREAM_SYMBOLS), blocks=B)
    sc = Scenario(cfg, link, arr, ctx["F"], ctx["schedule"], targets)
    y = noiseless_rx(sc, x)
    if not ctx["noiseless"]:
        y = y + _noise(trial_rng(exp.seed, trial, STREAM_NOISE), y.shape, link.noise_var)
    users = [TrackedUser(p, ctx["priors"][p], ctx["F"][:, p], x[:, p]) for p in range(P)]
    ests = estimate_all(cfg, arr, ctx["schedule"], users, y, ctx["steps"], t["refine_factor"],
                        t["levels"], diagonal=not t["full_system"],
                        cancel_passes=t["cancel_passes"])
    rows = []
    for e, tg in zip(ests, targets):
        rows.append({"trial": trial, "user": e.index,
                     "aoa_deg": float(np.degrees(tg.aoa)), "aoa_est_deg": float(np.degrees(e.aoa)),
                     "delay_s": tg.delay, "delay_est_s": e.delay,
                     "doppler_hz": tg.doppler, "doppler_est_hz": e.doppler,
                     "aoa_err_deg": float(np.degrees(e.aoa - tg.aoa)),
                     "range_err_m": float(SPEED_OF_LIGHT * (e.delay - tg.delay) / 2),
                     "velocity_err_mps": float(SPEED_OF_LIGHT * (e.doppler - tg.doppler) / (2 * link.fc)),
                     "gain_abs": abs(e.gain), "gain_abs_true": abs(tg.gain)})
    return rows


def tracking_crlb(exp: ExperimentConfig, ctx) -> list:
    """Per-user CRLB standard deviations in degrees, metres and m/s."""
    cfg, link, arr = exp.otfs, exp.link, exp.array
    P = len(ctx["kin"])
    out = []
    for p, ((nu, tau), phi, a) in enumerate(zip(ctx["kin"], ctx["angles"], ctx["amps"])):
        theta = ParamVector(a, 0.0, tau, nu, float(phi))
        fim = fisher_matrix(theta, SignalModel(cfg, arr, ctx["schedule"], ctx["F"][:, p]),
                            link.noise_var, link.p_avg / P)
        v = crlb(fim)
        out.append({"aoa_deg": float(np.degrees(np.sqrt(v[2]))),
                    "range_m": float(SPEED_OF_LIGHT * np.sqrt(v[3]) / 2),
                    "velocity_mps": float(SPEED_OF_LIGHT * np.sqrt(v[4]) / (2 * link.fc))})
    return out


TRACKING_COLUMNS = ["trial", "user", "aoa_deg", "aoa_est_deg", "delay_s", "delay_est_s", "doppler_hz",
                    "doppler_est_hz", "aoa_err_deg", "range_err_m", "velocity_err_mps", "gain_abs",
                    "gain_abs_true"]
TRACKING_SUMMARY = ["user", "range_m", "aoa_deg", "trials", "rmse_aoa_deg", "crlb_aoa_deg",
                    "rmse_range_m", "crlb_range_m", "rmse_velocity_mps", "crlb_velocity_mps",
                    "excess_aoa_db", "excess_range_db", "excess_velocity_db"]


def _excess_db(rmse, bound):
    if bound <= 0:
        return float("inf") if rmse > 0 else 0.0
    if rmse == 0:
        return float("-inf")
    return float(20 * np.log10(rmse / bound))


def run_tracking(exp: ExperimentConfig, order=None, workers=1, noiseless=False) -> ResultTable:
    """RMSE of angle, range and velocity per user next to the matching CRLB."""
    ctx = tracking_context(exp, noiseless)
    rows = run_trials(tracking_trial, ctx, exp.trials, order, workers)
    bounds = tracking_crlb(exp, ctx)
    summary = []
    for p, u in enumerate(exp.doc["tracking"]["users"]):
        sel = [r for r in rows if r["user"] == p]
        rm = {k: float(np.sqrt(np.mean([r[k] ** 2 for r in sel])))
              for k in ("aoa_err_deg", "range_err_m", "velocity_err_mps")}
        b = bounds[p]
        summary.append({"user": p, "range_m": float(u["range_m"]), "aoa_deg": float(u["aoa_deg"]),
                        "trials": len(sel),
                        "rmse_aoa_deg": rm["aoa_err_deg"], "crlb_aoa_deg": b["aoa_deg"],
                        "rmse_range_m": rm["range_err_m"], "crlb_range_m": b["range_m"],
                        "rmse_velocity_mps": rm["velocity_err_mps"], "crlb_velocity_mps": b["velocity_mps"],
                        "excess_aoa_db": _excess_db(rm["aoa_err_deg"], b["aoa_deg"]),
                        "excess_range_db": _excess_db(rm["range_err_m"], b["range_m"]),
                        "excess_velocity_db": _excess_db(rm["velocity_err_mps"], b["velocity_mps"])})
    return ResultTable("track", TRACKING_COLUMNS, rows, _meta(exp, "track"), TRACKING_SUMMARY, summary)


# -- CRLB study -----------------------------------------------------------

CRLB_COLUMNS = ["strategy", "B", "SNR_dB", "crlb_A", "crlb_psi", "crlb_phi_deg2", "crlb_tau_s2",
                "crlb_nu_hz2"]


def run_crlb_study(exp: ExperimentConfig, strategies=None) -> ResultTable:
    """CRLB versus SNR and block count for each receive strategy.

    SNR is ``A^2 P_avg / sigma^2``. Each entry is the geometric mean of the
    bound over the configured angles of arrival and ``crlb.schedule_draws``
    independent schedule realisations (the bound spans orders of magnitude
    across angles, so it is averaged in dB). The fully digital reference
    (``U = I``, one block) is added when ``crlb.include_digital`` is set.
    """
    c = exp.doc["crlb"]
    strategies = list(strategies or c["strategies"])
    if not strategies:
        raise ConfigurationError("at least one strategy is required")
    cfg, link, arr = exp.otfs, exp.link, exp.array
    nu, tau = exp.kinematics(c["range_m"], c["velocity_mps"])
    f = tx_beam(exp)
    sigma2, power = link.noise_var, link.p_avg
    angles = np.radians(c["aoa_deg"])
    draws = c["schedule_draws"]
    runs = [(s, B, [schedule(exp, B, s, k) for k in range(draws)]) for s in strategies for B in exp.blocks]
    if c["include_digital"]:
        runs.append(("fully_digital", 1, [fully_digital(arr.n_antennas)]))
    rows = []
    for name, B, schedules in runs:
        models = [SignalModel(cfg, arr, sch, f) for sch in schedules]
        for snr_db in c["snr_db"]:
            A = np.sqrt(10 ** (snr_db / 10) * sigma2 / power)
            logs = []
            for model in models:
                for phi in angles:
                    theta = ParamVector(A, 0.0, tau, nu, float(phi))
                    try:
                        logs.append(np.log(crlb(fisher_matrix(theta, model, sigma2, power))))
                    except SingularFisherError:
                        logs.append(np.full(5, np.inf))
            v = np.exp(np.mean(logs, axis=0))
            rows.append({"trial": 0, "strategy": name, "B": B, "SNR_dB": float(snr_db),
                         "crlb_A": v[0], "crlb_psi": v[1], "crlb_phi_deg2": v[2] * (180 / np.pi) ** 2,
                         "crlb_tau_s2": v[3], "crlb_nu_hz2": v[4]})
    return ResultTable("crlb", CRLB_COLUMNS, rows, _meta(exp, "crlb"))


def ks_exponential(values, scale=None):
    """KS test of ``values`` against an exponential law.

    ``scale`` defaults to the sample mean; note that estimating it makes
    the plain KS p-value conservative.
    """
    v = np.asarray(values, dtype=float)
    return stats.kstest(v, "expon", args=(0, v.mean() if scale is None else scale))


__all__ = ["ResultTable", "CalibrationResult", "run_trials", "synth_beams", "calibrate_cfar",
           "run_discovery", "run_tracking", "run_crlb_study", "tx_beam", "codebook", "schedule",
           "search_grid", "h0_statistics", "h0_cell_draws", "ks_exponential", "wilson"]

"""The eleven acceptance criteria, each at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line, printed in the terminal
summary. Run just this file with ``pytest tests/test_acceptance.py -v``;
the Monte Carlo criteria (4, 6, 7, 8) take several minutes each.
"""
import functools
import json

import numpy as np
from scipy import stats

from otfsradar import experiments as ex
from otfsradar.beamforming import beam_metrics
from otfsradar.channel import ObservationModel, Scenario, Target, UlaArray, noiseless_rx
from otfsradar.cli import run
from otfsradar.crlb import ParamVector, SignalModel, fisher_matrix
from otfsradar.detector import DetectionLimits, detect_all, sic_cancel
from otfsradar.otfs import OtfsConfig, PulseShape, generate_symbols, isfft, psi_exact, sfft
from otfsradar.scenario import ExperimentConfig, merge

from .conftest import ACCEPTANCE, crandn


def criterion(n, title):
    """Record one summary line per criterion; the body returns ``(ok, detail)``."""
    def wrap(fn):
        @functools.wraps(fn)
        def test(*args, **kwargs):
            try:
                ok, detail = fn(*args, **kwargs)
            except Exception as e:  # recorded, then re-raised
                ACCEPTANCE[n] = f"[{n:2d}] FAIL  {title}: {type(e).__name__}: {e}"
                raise
            ACCEPTANCE[n] = f"[{n:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
            print(ACCEPTANCE[n])
            assert ok, detail
        return test
    return wrap


@criterion(1, "transform exactness")
def test_c01_transform_exactness():
    rng = np.random.default_rng(1)
    worst = 0.0
    for N in range(1, 17):
        for M in range(1, 17):
            cfg = OtfsConfig(N, M, 1e6)
            x = crandn(rng, N, M)
            worst = max(worst, float(np.max(np.abs(sfft(isfft(x, cfg), cfg) - x))))
    worst_psi = 0.0
    for N, M in ((4, 4), (8, 8), (4, 8), (16, 16)):
        cfg = OtfsConfig(N, M, 1e6)
        P = psi_exact(cfg, PulseShape("rectangular", cfg.T), 0.0, 0.0)
        worst_psi = max(worst_psi, float(np.max(np.abs(P - np.eye(cfg.size)))))
    ok = worst <= 1e-12 and worst_psi <= 1e-10
    return ok, f"round trip max err {worst:.2e} (<= 1e-12), Psi(0,0) max err {worst_psi:.2e} (<= 1e-10)"


@criterion(2, "derivative correctness")
def test_c02_derivatives():
    cfg, arr = OtfsConfig(4, 4, 1e6), UlaArray(4)
    rng = np.random.default_rng(2)
    worst = {}
    names = ("A", "psi", "phi", "tau", "nu")
    for _ in range(20):
        sched = [np.linalg.qr(crandn(rng, 4, 2))[0] for _ in range(2)]
        f = crandn(rng, 4)
        model = SignalModel(cfg, arr, sched, f / np.linalg.norm(f))
        x = generate_symbols(cfg, 1, 1.0, rng, blocks=2)
        tau = (rng.integers(0, 4) + rng.uniform(0.1, 0.9)) * cfg.delay_step
        th = ParamVector(rng.uniform(0.5, 2.0), rng.uniform(-np.pi, np.pi), tau,
                         rng.uniform(-0.45, 0.45) * cfg.delta_f, rng.uniform(-1.2, 1.2))
        steps = (1e-4 * th.A, 1e-4, 1e-4, 1e-4 * cfg.delay_step, 1e-4 * cfg.doppler_step)
        D = model.derivatives(th, x)
        for i, h in enumerate(steps):
            fd = (model.mean(th.shifted(i, h), x) - model.mean(th.shifted(i, -h), x)) / (2 * h)
            err = float(np.linalg.norm(D[i] - fd) / np.linalg.norm(D[i]))
            worst[names[i]] = max(worst.get(names[i], 0.0), err)
    ok = max(worst.values()) < 1e-5
    return ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (< 1e-5)"


@criterion(3, "Fisher dual-path agreement")
def test_c03_fisher_dual_path():
    exp = ExperimentConfig.load()
    cfg, link = exp.otfs, exp.link
    nu, tau = exp.kinematics(30.0, 10.0)
    model = SignalModel(cfg, exp.array, ex.schedule(exp, 2), ex.tx_beam(exp))
    th = ParamVector(np.sqrt(link.noise_var / link.p_avg), 0.3, tau, nu, np.radians(10.37))
    closed = fisher_matrix(th, model, link.noise_var, link.p_avg)
    mc = fisher_matrix(th, model, link.noise_var, link.p_avg, method="mc", mc_trials=1000,
                       rng=np.random.default_rng(3))
    scale = np.sqrt(np.outer(np.diag(closed), np.diag(closed)))
    norm_err = float(np.max(np.abs(mc - closed) / scale))
    big = np.abs(closed) >= 0.05 * scale
    rel_err = float(np.max(np.abs(mc - closed)[big] / np.abs(closed)[big]))
    a_psi = float(max(abs(closed[0, 1]), abs(mc[0, 1])) / scale[0, 1])
    ok = norm_err <= 0.02 and rel_err <= 0.02 and a_psi <= 1e-3
    return ok, (f"1000 draws: max |dI|/sqrt(I_ii I_jj) {norm_err:.2e}, max relative error on entries "
                f">= 5% of scale {rel_err:.2e} (<= 2%); |I_A,psi| {a_psi:.1e} of scale (<= 1e-3)")


@criterion(4, "CFAR calibration")
def test_c04_cfar_calibration():
    exp = ExperimentConfig.load()
    res = ex.calibrate_cfar(exp, 0.01)
    fresh = ExperimentConfig.load(merge(exp.doc, {"cfar": {"alpha": res.alpha}}), seed=20240601)
    ratios = ex._h0_ratios(fresh, 50, ex.STREAM_VALIDATE, max(exp.blocks))
    p_fa = ex.measured_pfa(ratios, res.alpha)
    draws = ex.h0_cell_draws(fresh, 10_000)
    ks = stats.kstest(draws, "expon")
    ok = 0.0075 <= p_fa <= 0.0125 and ratios.size >= 10_000 and ks.pvalue > 0.05
    return ok, (f"alpha {res.alpha:.4f}; fresh-seed P_fa {p_fa:.5f} over {ratios.size} cells "
                f"(in [0.0075, 0.0125]); KS vs Exp(1) on 10^4 H0 draws p = {ks.pvalue:.3f} (> 0.05)")


@criterion(5, "noiseless oracle recovery")
def test_c05_noiseless_oracle():
    exp = ExperimentConfig.load()
    cfg, arr = exp.otfs, exp.array
    grid = ex.search_grid(exp)
    steps = grid.steps()
    c0 = grid.point((5, 2, 30))
    truth = (c0[0] + 3 * steps[0] / 10, c0[1] + 4 * steps[1] / 10, c0[2] + 2 * steps[2] / 10)
    h = 1e-6 * np.exp(0.7j)
    f, sch = ex.tx_beam(exp), ex.schedule(exp, 6)
    x = generate_symbols(cfg, 1, exp.link.p_avg, np.random.default_rng(5), blocks=6)
    sc = Scenario(cfg, exp.link, arr, f, sch, [Target(h, *truth)], noise_var=0.0)
    y = noiseless_rx(sc, x)
    model = ObservationModel(cfg, arr, sch, f, x, ex.psi_source(cfg, 10))
    dets = detect_all(model, y, grid, exp.cfar, DetectionLimits(1, 10, 1))
    if not dets:
        return False, "no detection"
    d = dets[0]
    perr = max(abs(a - b) / s for a, b, s in zip(d.refined, truth, steps))
    herr = abs(d.gain - h) / abs(h)
    res = float(np.linalg.norm(sic_cancel(model, y, d)) / np.linalg.norm(y))
    ok = perr <= 1e-9 and herr <= 1e-9 and res <= 1e-8
    return ok, (f"parameter error {perr:.1e} coarse steps, relative gain error {herr:.1e} (<= 1e-9), "
                f"SIC residual {res:.1e} (<= 1e-8)")


NEAR_FAR = {"trials": 200, "schedule": {"blocks": [6]},
            "discovery": {"ranges_m": [50.0], "interferers": []}}


@criterion(6, "near-far SIC")
def test_c06_near_far():
    single = ex.run_discovery(ExperimentConfig.load(NEAR_FAR))
    near = merge(NEAR_FAR, {"discovery": {"interferers": [{"range_m": 10.0, "velocity_mps": 5.0,
                                                            "aoa_deg": 0.0}]}})
    pair = ex.run_discovery(ExperimentConfig.load(near))
    p1, p2 = single.summary[0]["p_d"], pair.summary[0]["p_d"]
    inter = np.mean([r["interferers_detected"] for r in pair.rows])
    ok = abs(p1 - p2) <= 0.1
    return ok, (f"B=6, far target 50 m: P_d alone {p1:.3f}, with 10 m interferer {p2:.3f}, "
                f"|diff| {abs(p1 - p2):.3f} (<= 0.1); interferer found in {inter:.0%} of 200 trials")


@criterion(7, "block-integration ordering")
def test_c07_block_ordering():
    tab = ex.run_discovery(ExperimentConfig.load({"trials": 200}))
    pd = {(s["B"], s["range_m"]): s["p_d"] for s in tab.summary}
    ranges = sorted({r for _, r in pd})
    ok = all(pd[(6, r)] >= pd[(2, r)] for r in ranges)
    return ok, "200 trials, P_d(B=2) -> P_d(B=6): " + ", ".join(
        f"{r:g} m {pd[(2, r)]:.3f} -> {pd[(6, r)]:.3f}" for r in ranges)


@criterion(8, "tracking efficiency")
def test_c08_tracking():
    exp = ExperimentConfig.load({"trials": 500, "tracking": {"users": [
        {"range_m": 20.0, "velocity_mps": 10.0, "aoa_deg": -20.0}]}})
    s = ex.run_tracking(exp).summary[0]
    ex_db = [s["excess_aoa_db"], s["excess_range_db"], s["excess_velocity_db"]]
    ok = all(v <= 3.0 for v in ex_db)
    return ok, ("500 trials at 20 m: RMSE over CRLB aoa {:.2f} dB, range {:.2f} dB, velocity {:.2f} dB "
                "(each <= 3 dB)".format(*ex_db))


@criterion(9, "strategy ordering")
def test_c09_strategy_ordering():
    tab = ex.run_crlb_study(ExperimentConfig.load({"crlb": {"snr_db": [0.0]}}))
    v = {(r["strategy"], r["B"]): r["crlb_phi_deg2"] for r in tab.rows}
    order_ok = all(v[("flat_top", B)] <= v[(s, B)] for B in (2, 6) for s in ("dft", "antenna_selection"))
    digital = v[("fully_digital", 1)]
    digital_ok = all(digital <= val for val in v.values())
    parts = ", ".join(f"{s} B={B} {val:.3g}" for (s, B), val in sorted(v.items()))
    detail = (f"AoA CRLB (deg^2, 0 dB): {parts}; flat-top <= baselines: {order_ok}; "
              f"fully digital is the minimum: {digital_ok}")
    return order_ok and digital_ok, detail


@criterion(10, "beam synthesis quality")
def test_c10_beam_synthesis():
    res, mask, beam = ex._tx_design(16, 181, (-np.pi / 4, np.pi / 4))
    ripple, sll = beam_metrics(res.beam, mask)
    power_err = abs(beam.grid_power() - 1.0)
    rise = max(after - before for before, after in res.checkpoints)
    ok = ripple <= 1.0 and sll <= -15.0 and power_err <= 1e-10 and rise <= 0.0
    return ok, (f"ripple {ripple:.3f} dB (<= 1), SLL {sll:.2f} dB (<= -15), |f^H A^H A f - 1| "
                f"{power_err:.1e} (<= 1e-10), largest objective rise between checkpoints {rise:.1e} (<= 0)")


SMALL = {"trials": 3, "discovery": {"ranges_m": [40.0, 60.0]},
         "crlb": {"aoa_deg": [-20.37, 10.37], "schedule_draws": 2},
         "cfar": {"calibration_maps": 20, "validation_maps": 20},
         "tracking": {"levels": 1}}


@criterion(11, "reproducibility")
def test_c11_reproducibility(tmp_path):
    scen = tmp_path / "scenario.json"
    scen.write_text(json.dumps(SMALL))
    same = []
    for cmd in ("synth-beams", "calibrate-cfar", "discover", "track", "crlb"):
        outs = []
        for k in range(2):
            d = tmp_path / f"{cmd}-{k}"
            code = run([cmd, "--scenario", str(scen), "--out", str(d), "--seed", "7"])
            outs.append((code, {p.relative_to(d).as_posix(): p.read_bytes()
                                for p in sorted(d.rglob("*")) if p.is_file()}))
        same.append(outs[0][0] == 0 and outs[0] == outs[1])
    exp = ExperimentConfig.load(SMALL, seed=7)
    perm = [2, 0, 1]
    d_ok = ex.run_discovery(exp).rows == ex.run_discovery(exp, order=perm).rows
    t_ok = ex.run_tracking(exp).rows == ex.run_tracking(exp, order=perm).rows
    ok = all(same) and d_ok and t_ok
    return ok, (f"byte-identical reruns for 5/5 subcommands: {all(same)}; "
                f"permuted trial order leaves rows unchanged (discover {d_ok}, track {t_ok})")

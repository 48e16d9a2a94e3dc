"""
Detection, calibration and bounds
=================================

Calibrate the CFAR scale on noise-only frames, run a short discovery
experiment and compare receive strategies through the AoA CRLB. Trial
counts are kept small so this finishes in a few minutes.
"""
from otfsradar import experiments as ex
from otfsradar.scenario import ExperimentConfig, merge

exp = ExperimentConfig.load({"trials": 20, "cfar": {"calibration_maps": 20, "validation_maps": 20}})

res = ex.calibrate_cfar(exp, 0.01)
print(f"alpha = {res.alpha:.3f}  (calibration P_fa {res.calibration_pfa:.4f}, "
      f"validation {res.validation_pfa:.4f})")

# discovery with the calibrated scale
tab = ex.run_discovery(ExperimentConfig.load(merge(exp.doc, {"cfar": {"alpha": res.alpha}})))
for s in tab.summary:
    print(f"B = {s['B']}  range {s['range_m']:5.1f} m  P_d {s['p_d']:.2f}")

# AoA CRLB at 0 dB for each strategy
crlb = ex.run_crlb_study(ExperimentConfig.load({"crlb": {"snr_db": [0.0], "schedule_draws": 2}}))
for r in crlb.rows:
    print(f"{r['strategy']:>18s}  B = {r['B']}  {r['crlb_phi_deg2']:.3g} deg^2")

"""Command line entry point.

Exit codes: 0 on success, 2 for configuration errors, 3 when CFAR
calibration fails.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import experiments as ex
from .errors import CalibrationError, ConfigurationError, DomainError
from .scenario import ExperimentConfig, merge

EXIT_OK, EXIT_CONFIG, EXIT_CALIBRATION = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="otfsradar", description="OTFS joint radar experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"synth-beams": "synthesise the Tx beam, codebook atoms and schedules",
             "calibrate-cfar": "calibrate the OS-CFAR scale on noise-only maps",
             "discover": "Discovery-mode detection probability",
             "track": "Tracking-mode RMSE against the CRLB",
             "crlb": "CRLB versus SNR per receive strategy"}
    for name, text in helps.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("--scenario", type=Path, help="scenario JSON (fields override the profile)")
        s.add_argument("--out", type=Path, required=True, help="output directory")
        s.add_argument("--seed", type=_u64, help="master seed (overrides the scenario)")
        s.add_argument("--trials", type=_positive, help="Monte Carlo trials (overrides the scenario)")
        s.add_argument("--profile", choices=("desk", "paper"), default="desk")
        s.add_argument("--workers", type=_positive, default=1, help="worker processes for trials")
        if name == "calibrate-cfar":
            s.add_argument("--target-pfa", type=float, help="average false alarm probability")
    return p


def _calibrate(exp, args):
    res = ex.calibrate_cfar(exp, args.target_pfa)
    ex.calibration_table(exp, res).write(args.out, "calibration")
    user = json.loads(args.scenario.read_text()) if args.scenario else {}
    updated = merge(user, {"cfar": {"kappa": res.kappa, "alpha": res.alpha,
                                    "target_pfa": res.target_pfa}})
    (args.out / "scenario.calibrated.json").write_text(json.dumps(updated, indent=2, sort_keys=True) + "\n")
    print(f"kappa={res.kappa} alpha={res.alpha:.6g} P_fa calibration={res.calibration_pfa:.4g} "
          f"validation={res.validation_pfa:.4g}")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            exp = ExperimentConfig.load(args.scenario, args.profile, args.seed, args.trials)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "synth-beams":
            rep = ex.synth_beams(exp, args.out)
            print(f"tx beam ripple={rep['tx_beam']['ripple_db']:.3f} dB "
                  f"sll={rep['tx_beam']['sll_db']:.2f} dB")
        elif args.command == "calibrate-cfar":
            _calibrate(exp, args)
        elif args.command == "discover":
            tab = ex.run_discovery(exp, workers=args.workers)
            tab.write(args.out, "discovery")
            for s in tab.summary:
                print(f"B={s['B']} r={s['range_m']:g} m  P_d={s['p_d']:.3f} "
                      f"[{s['ci_low']:.3f}, {s['ci_high']:.3f}]")
        elif args.command == "track":
            tab = ex.run_tracking(exp, workers=args.workers)
            tab.write(args.out, "tracking")
            for s in tab.summary:
                print(f"user {s['user']}: excess over CRLB aoa={s['excess_aoa_db']:.2f} dB "
                      f"range={s['excess_range_db']:.2f} dB velocity={s['excess_velocity_db']:.2f} dB")
        elif args.command == "crlb":
            ex.run_crlb_study(exp).write(args.out, "crlb")
    except CalibrationError as e:
        print(f"calibration failed: {e}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (ConfigurationError, DomainError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

"""Scenario files: profiles, schema validation, unit conversion and digests.

A scenario file is a JSON object validated against
``schema/scenario.schema.json``. It is merged over a profile (``desk`` or
``paper``) so a file only needs the fields it changes. The merged document is
what gets hashed into the config digest written to every result header.
"""
from __future__ import annotations

import copy
import hashlib
import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .channel import SPEED_OF_LIGHT, LinkBudget, UlaArray
from .detector import CfarConfig
from .errors import ConfigurationError
from .otfs import OtfsConfig

DESK = {
    "name": "desk",
    "seed": 0,
    "trials": 200,
    "otfs": {"N": 8, "M": 8, "delta_f_hz": 1e6},
    "link": {"fc_hz": 28.25e9, "p_avg_dbm": 24.0, "rcs_m2": 1.0,
             "noise_psd_w_per_hz": 2e-21, "noise_figure_db": 3.0},
    "array": {"n_antennas": 16, "n_rf": 4},
    "fov_deg": [-45.0, 45.0],
    "codebook": {"dtheta_deg": 15.0, "ddtheta_deg": 5.0, "synthesis_points": 181, "eps_orth": 0.1},
    "schedule": {"strategy": "flat_top", "blocks": [2, 6], "seed": 0},
    "search": {"angle_step_deg": 1.0, "refine_factor": 10, "levels": 1},
    "cfar": {"window": [3, 3, 3], "guard": [1, 1, 1], "kappa": 0.75, "alpha": 3.42,
             "target_pfa": 0.01, "alpha_bounds": [1.0, 50.0],
             "calibration_maps": 50, "validation_maps": 50},
    "discovery": {"ranges_m": [40.0, 60.0, 80.0], "velocity_mps": [-30.0, 30.0],
                  "aoa_deg": [-40.0, 40.0], "aoa_tol_deg": 0.5, "interferers": [],
                  "min_separation_deg": 10.0},
    "tracking": {"users": [{"range_m": 20.0, "velocity_mps": 10.0, "aoa_deg": -20.0},
                           {"range_m": 20.0, "velocity_mps": -5.0, "aoa_deg": 25.0}],
                 "isolation_tol": 0.05, "blocks": 6, "refine_factor": 10, "levels": 3,
                 "cancel_passes": 1, "full_system": False},
    "crlb": {"snr_db": [-10.0, 0.0, 10.0, 20.0], "strategies": ["flat_top", "dft", "antenna_selection"],
             "aoa_deg": [float(a) for a in np.arange(-44, 45, 4) + 0.37],
             "range_m": 30.0, "velocity_mps": 10.0, "schedule_draws": 8, "include_digital": True},
}

PAPER = copy.deepcopy(DESK)
PAPER.update({
    "name": "paper",
    "otfs": {"N": 64, "M": 64, "delta_f_hz": 1e6},
    "array": {"n_antennas": 64, "n_rf": 4},
})

PROFILES = {"desk": DESK, "paper": PAPER}

# Seed-sequence stream tags, so one trial's draws never overlap another purpose.
STREAM_TARGETS, STREAM_SYMBOLS, STREAM_NOISE, STREAM_VALIDATE = 0, 1, 2, 3


def schema() -> dict:
    """The published scenario schema."""
    text = resources.files("otfsradar").joinpath("schema/scenario.schema.json").read_text()
    return json.loads(text)


def _path(err) -> str:
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)


def validate(doc: dict):
    """Raise :class:`ConfigurationError` naming the first offending field."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigurationError(f"{_path(e)}: {e.message}")


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; lists and scalars in ``override`` replace."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def digest(doc) -> str:
    """SHA-256 of the canonical JSON encoding."""
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def trial_rng(seed: int, trial: int, stream: int) -> np.random.Generator:
    """Generator for one (trial, purpose) pair, independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(trial), int(stream))))


@dataclass
class ExperimentConfig:
    """Validated, merged scenario with derived SI-unit objects."""

    doc: dict
    profile: str = "desk"

    @classmethod
    def load(cls, source=None, profile: str = "desk", seed: int | None = None,
             trials: int | None = None) -> "ExperimentConfig":
        """Read a scenario (path, dict or ``None``) and merge it over ``profile``.

        ``seed`` and ``trials`` override the file when given.
        """
        if profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {profile!r}; choose desk or paper")
        if source is None:
            user = {}
        elif isinstance(source, dict):
            user = source
        else:
            try:
                user = json.loads(Path(source).read_text())
            except FileNotFoundError:
                raise ConfigurationError(f"scenario file {source} not found") from None
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"scenario file {source} is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigurationError("$: scenario must be a JSON object")
        validate(user)
        doc = merge(PROFILES[profile], user)
        if seed is not None:
            doc["seed"] = int(seed)
        if trials is not None:
            doc["trials"] = int(trials)
        validate(doc)
        if profile == "paper":
            warnings.warn("paper profile: N = M = N_a = 64 makes every Monte Carlo run very slow",
                          RuntimeWarning, stacklevel=2)
        out = cls(doc, profile)
        out.check()
        return out

    # derived objects
    @cached_property
    def otfs(self) -> OtfsConfig:
        o = self.doc["otfs"]
        return OtfsConfig(o["N"], o["M"], o["delta_f_hz"])

    @cached_property
    def link(self) -> LinkBudget:
        lk = self.doc["link"]
        return LinkBudget.from_db(lk["fc_hz"], self.otfs.bandwidth, lk["p_avg_dbm"], lk["rcs_m2"],
                                  lk["noise_psd_w_per_hz"], lk["noise_figure_db"])

    @cached_property
    def array(self) -> UlaArray:
        return UlaArray(self.doc["array"]["n_antennas"])

    @property
    def n_rf(self) -> int:
        return self.doc["array"]["n_rf"]

    @property
    def fov(self):
        return tuple(np.radians(self.doc["fov_deg"]))

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def trials(self) -> int:
        return self.doc["trials"]

    @property
    def blocks(self):
        return list(self.doc["schedule"]["blocks"])

    @cached_property
    def cfar(self) -> CfarConfig:
        c = self.doc["cfar"]
        return CfarConfig(tuple(c["window"]), tuple(c["guard"]), c["kappa"], c["alpha"])

    @property
    def digest(self) -> str:
        return digest(self.doc)

    def kinematics(self, range_m, velocity):
        """``(nu, tau)`` for a range (m) and radial velocity (m/s)."""
        return (2 * velocity * self.link.fc / SPEED_OF_LIGHT, 2 * range_m / SPEED_OF_LIGHT)

    def check(self):
        """Cross-field checks the schema cannot express."""
        d = self.doc
        try:
            _, arr, cfar = self.otfs, self.array, self.cfar
        except (ConfigurationError, ValueError) as e:
            raise ConfigurationError(str(e)) from None
        if self.n_rf > arr.n_antennas:
            raise ConfigurationError("$.array.n_rf: more RF chains than antennas")
        lo, hi = d["fov_deg"]
        if not -90 <= lo < hi <= 90:
            raise ConfigurationError("$.fov_deg: need -90 <= lo < hi <= 90")
        cb = d["codebook"]
        for name, total, step in (("dtheta_deg", hi - lo, cb["dtheta_deg"]),
                                  ("ddtheta_deg", cb["dtheta_deg"], cb["ddtheta_deg"])):
            r = total / step
            if abs(r - round(r)) > 1e-9:
                raise ConfigurationError(f"$.codebook.{name}: {step} does not divide {total}")
        a_lo, a_hi = d["cfar"]["alpha_bounds"]
        if not 0 < a_lo < a_hi:
            raise ConfigurationError("$.cfar.alpha_bounds: need 0 < lo < hi")
        if cfar.n_neighbors < 8:
            raise ConfigurationError("$.cfar.window: fewer than 8 training cells")
        disc = d["discovery"]
        vmax = max(abs(v) for v in disc["velocity_mps"])
        for i, r in enumerate(disc["ranges_m"]):
            self._check_kin(f"$.discovery.ranges_m[{i}]", r, vmax)
        for i, t in enumerate(disc["interferers"]):
            self._check_kin(f"$.discovery.interferers[{i}]", t["range_m"], t.get("velocity_mps", 0.0))
        for i, u in enumerate(d["tracking"]["users"]):
            self._check_kin(f"$.tracking.users[{i}]", u["range_m"], u.get("velocity_mps", 0.0))
        cr = d["crlb"]
        self._check_kin("$.crlb.range_m", cr["range_m"], cr["velocity_mps"])

    def _check_kin(self, where, range_m, velocity):
        nu, tau = self.kinematics(range_m, velocity)
        cfg = self.otfs
        if not tau < cfg.N * cfg.T:
            raise ConfigurationError(f"{where}: range {range_m} m exceeds the unambiguous "
                                     f"{SPEED_OF_LIGHT * cfg.N * cfg.T / 2:.1f} m")
        if not abs(nu) < cfg.delta_f / 2:
            raise ConfigurationError(f"{where}: velocity {velocity} m/s aliases in Doppler")

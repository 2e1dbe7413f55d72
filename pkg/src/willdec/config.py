"""Experiment configuration: plain-text nested key-value files.

Lines are ``section.key = value`` with ``#`` comments; values are
numbers, whitelisted field expressions, or comma lists.  The parsed
config echoes back into the run manifest verbatim (canonicalised), and
every run is a pure function of (config, master seed).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .extinction import ExtinctionProfile, SpatialGrid, build_profile, fingerprint
from .fields import FieldSyntaxError, parse_field
from .measures import ParticleMeasure
from .mechanism import BranchingMechanism, MechanismError, make_mechanism
from .motion import MotionError, MotionModel


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "mechanism.kind": "quadratic",
    "mechanism.alpha": "0.0",
    "mechanism.b": "0.0",
    "mechanism.stable_c": "0.0",
    "mechanism.stable_a": "1.5",
    "mechanism.K": "10.0",
    "motion.kind": "brownian",
    "motion.d": "1",
    "motion.sigma": "1.0",
    "motion.drift": "0.0",
    "motion.box_lo": "-6.0",
    "motion.box_hi": "6.0",
    "motion.subordinator_index": "0.5",
    "grid.t1": "0.05",
    "grid.t_max": "6.0",
    "grid.dt": "0.01",
    "grid.x_lo": "-6.0",
    "grid.x_hi": "6.0",
    "grid.nx": "241",
    "initial.mass": "1.0",
    "initial.x": "0.0",
    "conditioning.h": "1.0",
    "conditioning.eps": "0.02",
    "truncation.delta": "0.01",
    "truncation.eps_n": "auto",
    "mc.n_verify": "5000",
    "mc.n_paths": "10000",
    "mc.n_replicas": "200",
    "mc.spine_particles": "256",
    "mc.attempt_budget": "200000",
    "mc.laplace_n": "20000",
    "run.master_seed": "20260811",
    "run.output_dir": "out",
    "run.tests": "flow_identity,w_feynman_kac,martingale_means,laplace_identity",
}

_FLOAT_KEYS = {
    "mechanism.stable_a", "mechanism.K", "motion.sigma", "motion.box_lo", "motion.box_hi",
    "motion.subordinator_index", "grid.t1", "grid.t_max", "grid.dt", "grid.x_lo",
    "grid.x_hi", "initial.mass", "initial.x", "conditioning.h", "conditioning.eps",
    "truncation.delta",
}
_INT_KEYS = {
    "motion.d", "grid.nx", "mc.n_verify", "mc.n_paths", "mc.n_replicas",
    "mc.spine_particles", "mc.attempt_budget", "mc.laplace_n", "run.master_seed",
}
_FIELD_KEYS = {"mechanism.alpha", "mechanism.b", "mechanism.stable_c", "motion.drift"}

KNOWN_TESTS = (
    "flow_identity",
    "w_feynman_kac",
    "martingale_means",
    "laplace_identity",
    "conditioned_equivalence",
    "mixture",
    "near_extinction_trend",
    "z_law",
)


def parse_config_text(text: str) -> dict:
    """Parse key-value lines; unknown keys and malformed lines are errors."""
    values = dict(_DEFAULTS)
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'section.key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _DEFAULTS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        if not val:
            raise ConfigError(f"config line {lineno}: empty value for {key!r}")
        seen.add(key)
        values[key] = val
    return values


def apply_overrides(values: dict, overrides: dict) -> dict:
    out = dict(values)
    for key, val in overrides.items():
        if key not in _DEFAULTS:
            raise ConfigError(f"override: unknown key {key!r}")
        out[key] = str(val)
    return out


def canonical_text(values: dict) -> str:
    return "\n".join(f"{k} = {values[k]}" for k in sorted(values)) + "\n"


def _divides(small: float, big: float) -> bool:
    if small <= 0:
        return False
    ratio = big / small
    return abs(round(ratio) - ratio) <= 1e-9 * max(1.0, abs(ratio))


@dataclass
class ExperimentConfig:
    values: dict
    mech: BranchingMechanism = field(init=False, repr=False)
    motion: MotionModel = field(init=False, repr=False)
    grid: SpatialGrid = field(init=False, repr=False)
    mu: ParticleMeasure = field(init=False, repr=False)

    def __post_init__(self):
        v = self.values

        def flt(key):
            try:
                return float(v[key])
            except ValueError:
                raise ConfigError(f"config key {key}: expected a number, got {v[key]!r}")

        def integer(key):
            try:
                return int(v[key])
            except ValueError:
                raise ConfigError(f"config key {key}: expected an integer, got {v[key]!r}")

        for key in _FIELD_KEYS:
            try:
                parse_field(v[key])
            except FieldSyntaxError as exc:
                raise ConfigError(f"config key {key}: {exc}")

        kind = v["mechanism.kind"]
        try:
            self.mech = make_mechanism(
                kind,
                alpha=v["mechanism.alpha"], b=v["mechanism.b"],
                stable_c=v["mechanism.stable_c"], stable_a=flt("mechanism.stable_a"),
                K=flt("mechanism.K"),
            )
        except (MechanismError, FieldSyntaxError) as exc:
            raise ConfigError(f"mechanism: {exc}")

        try:
            self.motion = MotionModel(
                kind=v["motion.kind"], d=integer("motion.d"), sigma=flt("motion.sigma"),
                drift=parse_field(v["motion.drift"]),
                box_lo=flt("motion.box_lo"), box_hi=flt("motion.box_hi"),
                subordinator_index=flt("motion.subordinator_index"),
                step_dt=flt("grid.dt"),
            )
        except MotionError as exc:
            raise ConfigError(f"motion: {exc}")

        try:
            self.grid = SpatialGrid(
                x_lo=flt("grid.x_lo"), x_hi=flt("grid.x_hi"), nx=integer("grid.nx"),
                t1=flt("grid.t1"), t_max=flt("grid.t_max"), dt=flt("grid.dt"),
            )
        except Exception as exc:
            raise ConfigError(f"grid: {exc}")
        if not self.grid.x_lo < self.grid.x_hi:
            raise ConfigError("grid: x_lo must be below x_hi")
        if self.grid.nx < 2:
            raise ConfigError("grid: nx must be at least 2")

        dt = self.grid.dt
        h = flt("conditioning.h")
        eps = flt("conditioning.eps")
        delta = flt("truncation.delta")
        if not _divides(dt, h):
            raise ConfigError(f"conditioning: dt={dt} does not divide h={h}")
        for t_req in (h / 4.0, h / 2.0, 3.0 * h / 4.0, 0.25, 0.75):
            if not _divides(dt, t_req):
                raise ConfigError(f"grid: dt={dt} does not divide the requested time {t_req}")
        if eps < dt - 1e-12:
            raise ConfigError(f"conditioning: eps={eps} must be at least dt={dt}")
        if delta < dt - 1e-12:
            raise ConfigError(f"truncation: delta={delta} must be at least dt={dt}")
        if v["truncation.eps_n"] != "auto":
            try:
                if float(v["truncation.eps_n"]) <= 0:
                    raise ConfigError("truncation: eps_n must be positive or 'auto'")
            except ValueError:
                raise ConfigError(f"truncation: eps_n must be a number or 'auto', got {v['truncation.eps_n']!r}")

        try:
            self.mech.validate(self.grid.x)
        except MechanismError as exc:
            raise ConfigError(f"mechanism: {exc}")

        for test in self.tests:
            if test not in KNOWN_TESTS:
                raise ConfigError(f"run.tests: unknown test {test!r} (known: {', '.join(KNOWN_TESTS)})")

        x0 = flt("initial.x")
        d = integer("motion.d")
        loc = np.full(d, x0)
        self.mu = ParticleMeasure.delta(loc, flt("initial.mass"))

    # -- convenience accessors ------------------------------------------------
    @property
    def h(self) -> float:
        return float(self.values["conditioning.h"])

    @property
    def eps(self) -> float:
        return float(self.values["conditioning.eps"])

    @property
    def delta(self) -> float:
        return float(self.values["truncation.delta"])

    @property
    def eps_n(self) -> Optional[float]:
        raw = self.values["truncation.eps_n"]
        return None if raw == "auto" else float(raw)

    @property
    def master_seed(self) -> int:
        return int(self.values["run.master_seed"])

    @property
    def output_dir(self) -> str:
        return os.environ.get("WILLDEC_OUTPUT_DIR", self.values["run.output_dir"])

    @property
    def tests(self) -> list:
        return [t.strip() for t in self.values["run.tests"].split(",") if t.strip()]

    def mc(self, key: str) -> int:
        return int(self.values[f"mc.{key}"])

    @property
    def model_name(self) -> str:
        return f"{self.values['mechanism.kind']}/{self.values['motion.kind']}"

    def mech_fingerprint(self) -> str:
        keys = sorted(k for k in self.values if k.startswith("mechanism."))
        return fingerprint("\n".join(f"{k}={self.values[k]}" for k in keys))

    def motion_fingerprint(self) -> str:
        keys = sorted(k for k in self.values if k.startswith("motion."))
        return fingerprint("\n".join(f"{k}={self.values[k]}" for k in keys))

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_text(self.values).encode()).hexdigest()

    def build_profile(self) -> ExtinctionProfile:
        return build_profile(self.mech, self.motion, self.grid,
                             self.mech_fingerprint(), self.motion_fingerprint())


def load_config(path: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    with open(path) as fh:
        values = parse_config_text(fh.read())
    if overrides:
        values = apply_overrides(values, overrides)
    return ExperimentConfig(values)


def config_from_values(values: dict) -> ExperimentConfig:
    merged = dict(_DEFAULTS)
    merged.update({k: str(v) for k, v in values.items()})
    return ExperimentConfig(merged)


# ---------------------------------------------------------------------------
# manifest


MANIFEST_VERSION = "willdec-manifest-1"


def build_manifest(cfg: ExperimentConfig, subcommand: str, args: dict) -> dict:
    import scipy

    return {
        "format": MANIFEST_VERSION,
        "subcommand": subcommand,
        "args": args,
        "config": {k: cfg.values[k] for k in sorted(cfg.values)},
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.master_seed,
        "versions": {
            "willdec": __import__("willdec").__version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(str(p) for p in sys.version_info[:3]),
        },
    }


def manifest_json(manifest: dict) -> str:
    return json.dumps(manifest, sort_keys=True, indent=1) + "\n"

"""JSON experiment configuration: closed key set, validation, and object builders."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .integrator import InitialData, StepperConfig, initial_norm_sq
from .kernel import KernelSpec, exponential_kernel, tabulated_kernel
from .nonlinearity import NonlinearitySpec, allen_cahn
from .spectral import NoiseSpec, build_basis
from .state import InitialHistory


class ConfigError(ValueError):
    pass


_NOISE_RULE = re.compile(r"^\s*([0-9.eE+-]+)\s*/\s*k\s*\^\s*([0-9.eE+-]+)\s*$")


@dataclass
class ExperimentConfig:
    domain_length: float = 1.0
    n_modes: int = 32
    M: int | None = None
    kernel: dict = field(default_factory=lambda: {"family": "exponential", "amplitude": 0.5, "rate": 1.0})
    noise: object = "0.1/k^2"
    nonlinearity: object = field(default_factory=lambda: [0.0, 1.0, 0.0, -1.0])
    dt: float = 1e-3
    T: float = 10.0
    tail_tol: float = 1e-12
    memory: str = "auto"
    ensemble: int = 8
    master_seed: int = 2024
    record_every: int = 10
    snapshots: bool = False
    x: dict = field(default_factory=lambda: {"u0": "zero"})
    y: dict | None = None
    coupling: str = "tilde"
    tol: float = 0.05
    t_min: float | None = None
    slope_limit: float | None = None
    N_multiplier: float = 2.0
    beta: float | None = None
    t_ref: float | None = None
    burn_in: float = 50.0
    n_power: float = 2.0
    refine_n: list = field(default_factory=lambda: [8, 16, 32])
    refine_n_ref: int | None = 64
    refine_dt: list = field(default_factory=lambda: [4e-3, 2e-3, 1e-3])
    refine_T: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    # -- builders ------------------------------------------------------------
    def kernel_spec(self) -> KernelSpec:
        k = self.kernel
        if k["family"] == "exponential":
            return exponential_kernel(k["amplitude"], k["rate"])
        return tabulated_kernel(k["grid"], k["values"], k["rate"])

    def noise_spec(self, n: int | None = None) -> NoiseSpec:
        n = self.n_modes if n is None else n
        if isinstance(self.noise, str):
            amp, power = _parse_noise_rule(self.noise)
            return NoiseSpec.power_law(amp, power, n)
        lam = np.asarray(self.noise, dtype=float)
        if lam.size < n:
            raise ConfigError(f"noise: explicit list has {lam.size} entries, need {n}")
        return NoiseSpec(lam[:n])

    def nonlinearity_spec(self) -> NonlinearitySpec:
        if self.nonlinearity == "allen_cahn":
            return allen_cahn()
        if self.nonlinearity == "zero":
            return NonlinearitySpec(())
        return NonlinearitySpec(tuple(self.nonlinearity))

    def stepper(self, n: int | None = None, **overrides) -> StepperConfig:
        n = self.n_modes if n is None else n
        M = self.M if self.M is not None else 4 * self.n_modes
        M = max(n + 1, int(round(M * n / self.n_modes)))
        kw = dict(basis=build_basis(n, self.domain_length), kernel=self.kernel_spec(),
                  noise=self.noise_spec(n), nonlinearity=self.nonlinearity_spec(), dt=self.dt,
                  T=self.T, M=M, tail_tol=self.tail_tol, memory=self.memory)
        kw.update(overrides)
        return StepperConfig(**kw)

    def initial(self, which: str, cfg: StepperConfig) -> InitialData:
        spec = self.x if which == "x" else self.y
        if spec is None:
            raise ConfigError(f"{which}: initial data required for this experiment")
        return build_initial(spec, cfg, which)


def _parse_noise_rule(rule: str) -> tuple[float, float]:
    m = _NOISE_RULE.match(rule)
    if not m:
        raise ConfigError(f"noise: expected a list or a rule like '0.1/k^2', got {rule!r}")
    return float(m.group(1)), float(m.group(2))


def _coeff_vector(value, n: int, where: str) -> np.ndarray:
    if isinstance(value, str):
        if value == "zero":
            return np.zeros(n)
        m = re.fullmatch(r"e(\d+)", value)
        if m and 1 <= int(m.group(1)) <= n:
            v = np.zeros(n)
            v[int(m.group(1)) - 1] = 1.0
            return v
        raise ConfigError(f"{where}: unknown preset {value!r} (use 'zero', 'e<k>' or a list)")
    v = np.asarray(value, dtype=float)
    if v.ndim != 1 or v.size > n:
        raise ConfigError(f"{where}: expected at most {n} coefficients")
    out = np.zeros(n)
    out[: v.size] = v
    return out


_INITIAL_KEYS = {"u0", "eta0", "scale", "norm"}
_HISTORY_KEYS = {"kind", "coeffs", "s_grid", "samples", "hold_tail"}


def build_initial(spec: dict, cfg: StepperConfig, where: str = "x") -> InitialData:
    n = cfg.n_modes
    u0 = _coeff_vector(spec.get("u0", "zero"), n, f"{where}.u0")
    eta = spec.get("eta0", "zero")
    if eta == "zero":
        hist = InitialHistory.zero()
    elif isinstance(eta, dict) and eta.get("kind") == "constant":
        hist = InitialHistory.constant(_coeff_vector(eta.get("coeffs", "zero"), n, f"{where}.eta0.coeffs"))
    elif isinstance(eta, dict) and eta.get("kind") == "sampled":
        samples = np.asarray(eta["samples"], dtype=float)
        padded = np.zeros((samples.shape[0], n))
        padded[:, : samples.shape[1]] = samples[:, :n]
        hist = InitialHistory.sampled(np.asarray(eta["s_grid"], dtype=float), padded,
                                      bool(eta.get("hold_tail", False)))
    else:
        raise ConfigError(f"{where}.eta0: expected 'zero' or an object with kind constant/sampled")
    x = InitialData(u0, hist)
    if "scale" in spec:
        x = x.scaled(float(spec["scale"]))
    if "norm" in spec:
        cur = math.sqrt(initial_norm_sq(x, cfg))
        if cur == 0:
            raise ConfigError(f"{where}.norm: cannot rescale the zero point")
        x = x.scaled(float(spec["norm"]) / cur)
    return x


# -- loading & validation ----------------------------------------------------------

_FIELD_NAMES = [f.name for f in fields(ExperimentConfig)]


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def _check_keys(obj: dict, allowed: set, where: str):
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{key}")


_NUMERIC = ("domain_length", "dt", "T", "tail_tol", "tol", "N_multiplier", "burn_in", "n_power",
            "refine_T")
_OPTIONAL_NUMERIC = ("t_min", "slope_limit", "beta", "t_ref")


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    for name in _NUMERIC:
        _require(_is_number(getattr(cfg, name)), f"{name} must be a finite number")
    for name in _OPTIONAL_NUMERIC:
        v = getattr(cfg, name)
        _require(v is None or _is_number(v), f"{name} must be a finite number or null")
    _require(isinstance(cfg.refine_n, list) and isinstance(cfg.refine_dt, list)
             and all(_is_number(v) for v in cfg.refine_dt), "refine lists must be JSON arrays of numbers")
    _require(cfg.domain_length > 0, "domain_length must be positive")
    _require(isinstance(cfg.n_modes, int) and cfg.n_modes >= 1, "n_modes must be a positive integer")
    _require(cfg.M is None or (isinstance(cfg.M, int) and cfg.M > cfg.n_modes),
             "M must be an integer larger than n_modes")
    _require(isinstance(cfg.dt, (int, float)) and cfg.dt > 0, "dt must be positive")
    _require(cfg.T >= 0, "T must be nonnegative")
    _require(0 < cfg.tail_tol < 1, "tail_tol must lie in (0, 1)")
    _require(cfg.memory in ("auto", "direct", "recursive"), "memory must be auto, direct or recursive")
    _require(isinstance(cfg.ensemble, int) and cfg.ensemble >= 1, "ensemble must be a positive integer")
    _require(isinstance(cfg.master_seed, int) and 0 <= cfg.master_seed < 2**64,
             "master_seed must be an unsigned 64-bit integer")
    _require(isinstance(cfg.record_every, int) and cfg.record_every >= 1,
             "record_every must be a positive integer")
    _require(cfg.coupling in ("hat", "tilde"), "coupling must be 'hat' or 'tilde'")
    _require(cfg.tol >= 0, "tol must be nonnegative")
    _require(cfg.N_multiplier >= 1, "N_multiplier must be at least 1")
    _require(cfg.beta is None or cfg.beta >= 0, "beta must be nonnegative")
    _require(cfg.burn_in >= 0, "burn_in must be nonnegative")
    _require(cfg.n_power >= 0, "n_power must be nonnegative")
    _require(cfg.refine_T > 0, "refine_T must be positive")
    _require(len(cfg.refine_n) >= 2 and all(isinstance(n, int) and n >= 1 for n in cfg.refine_n),
             "refine_n must list at least two positive integers")
    _require(len(cfg.refine_dt) >= 3 and all(d > 0 for d in cfg.refine_dt),
             "refine_dt must list at least three positive steps")

    k = cfg.kernel
    _require(isinstance(k, dict) and "family" in k, "kernel must be an object with a family")
    if k["family"] == "exponential":
        _check_keys(k, {"family", "amplitude", "rate"}, "kernel")
        _require(k.get("amplitude", 0) > 0, "kernel.amplitude must be positive")
        _require(k.get("rate", 0) > 0, "kernel.rate must be positive")
    elif k["family"] == "tabulated":
        _check_keys(k, {"family", "grid", "values", "rate"}, "kernel")
        _require({"grid", "values", "rate"} <= set(k), "kernel: tabulated family needs grid, values and rate")
    else:
        raise ConfigError("kernel.family must be 'exponential' or 'tabulated'")

    if isinstance(cfg.noise, str):
        _parse_noise_rule(cfg.noise)
    else:
        _require(isinstance(cfg.noise, list) and len(cfg.noise) >= cfg.n_modes
                 and all(v >= 0 for v in cfg.noise),
                 "noise must be a rule 'A/k^p' or a list of n_modes nonnegative values")
    if not (cfg.nonlinearity in ("allen_cahn", "zero") or isinstance(cfg.nonlinearity, list)):
        raise ConfigError("nonlinearity must be 'allen_cahn', 'zero' or an ascending coefficient list")
    for which in ("x", "y"):
        spec = getattr(cfg, which)
        if spec is None:
            continue
        _require(isinstance(spec, dict), f"{which} must be an object")
        _check_keys(spec, _INITIAL_KEYS, which)
        eta = spec.get("eta0")
        if isinstance(eta, dict):
            _check_keys(eta, _HISTORY_KEYS, f"{which}.eta0")
    # building the objects surfaces any remaining structural problems
    try:
        cfg.kernel_spec()
        cfg.nonlinearity_spec()
        stepper = cfg.stepper()
        for which in ("x", "y"):
            if getattr(cfg, which) is not None:
                cfg.initial(which, stepper)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    _check_keys(data, set(_FIELD_NAMES), "")
    return validate(ExperimentConfig(**data))


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("fadingmem.presets").iterdir()
                  if p.name.endswith(".json"))


def load_config(path: str | Path) -> ExperimentConfig:
    """Load a JSON file or a bundled preset name (``ref1``, ``ref1_tilde``, ``ref1_hat``)."""
    p = Path(path)
    if not p.exists() and str(path) in preset_names():
        text = resources.files("fadingmem.presets").joinpath(f"{path}.json").read_text()
        source = f"preset {path}"
    else:
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        source = str(p)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)

"""Run configuration: JSON schema, defaults per experiment and validation.

A config is a JSON object.  Only ``experiment`` and ``seed`` are required;
everything else is filled from the experiment defaults.  Validation errors
name the offending field by its dotted path, e.g. ``kernel.lam``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .domain import Potential, potential_from_dict

EXPERIMENTS = ("toy", "polymer", "separable-test", "custom")
DT = 25e-5
STRIDE = 20
RECORD_DT = DT * STRIDE


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n" + "\n".join(f"  {p}: {m}" for p, m in self.errors))


@dataclass
class IntegratorSection:
    dt: float = DT
    record_stride: int = STRIDE
    beta: float = 1.0


@dataclass
class KernelSection:
    mode: str = "grid_delta"
    lam: float = 1e-5
    eps: float | None = None


@dataclass
class ScheduleSection:
    t_up: float = 100 * RECORD_DT
    n_up: int = 60
    m_per_update: int = 8
    weight_mode: str = "unweighted"
    gabf_baseline: bool = False
    gabf_threshold: float = 20.0


@dataclass
class ALSSection:
    max_sweeps: int = 50
    rel_tol: float = 1e-6


@dataclass
class OutputSection:
    write_samples: bool = True
    hist_bins: int = 30


@dataclass
class RunConfig:
    experiment: str
    seed: int
    potential: dict = field(default_factory=dict)
    integrator: IntegratorSection = field(default_factory=IntegratorSection)
    n_replicas: int = 30
    n_nodes: int = 30
    kernel: KernelSection = field(default_factory=KernelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    als: ALSSection = field(default_factory=ALSSection)
    output: OutputSection = field(default_factory=OutputSection)
    initial_z: list | None = None

    # -- derived quantities

    @property
    def steps_per_update(self) -> int:
        return int(round(self.schedule.t_up / self.integrator.dt))

    @property
    def t_total(self) -> float:
        return self.schedule.t_up * self.schedule.n_up

    def build_potential(self) -> Potential:
        return potential_from_dict(self.potential)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "integrator": IntegratorSection,
    "kernel": KernelSection,
    "schedule": ScheduleSection,
    "als": ALSSection,
    "output": OutputSection,
}


def _defaults(experiment: str) -> dict:
    base = {
        "potential": {},
        "integrator": asdict(IntegratorSection()),
        "n_replicas": 30,
        "n_nodes": 30,
        "kernel": asdict(KernelSection()),
        "schedule": asdict(ScheduleSection()),
        "als": asdict(ALSSection()),
        "output": asdict(OutputSection()),
        "initial_z": None,
    }
    if experiment == "toy":
        base["potential"] = {"kind": "toy"}
    elif experiment == "polymer":
        base["potential"] = {"kind": "polymer", "n_particles": 100, "n_polymer": 5, "eps": 1.0,
                             "sigma": 0.5, "omega": 1.0, "h": 3.0, "delta": 0.01, "z_lo": -0.2,
                             "z_hi": 1.2, "wca_form": "continuous"}
        base["n_replicas"] = 50
        # explicit Euler is unstable in the WCA core at dt = 25e-5; the
        # recording interval record_stride * dt is kept at 5e-3
        base["integrator"].update(dt=1e-4, record_stride=50)
        base["kernel"]["lam"] = 0.05
        base["schedule"].update(t_up=1e4 * RECORD_DT, n_up=7, m_per_update=None, gabf_baseline=True)
    elif experiment == "separable-test":
        base["potential"] = {"kind": "separable", "dim_q": 2, "w_amp": 1.0, "q_length": 1.0,
                             "z_length": 1.0,
                             "profiles": [{"kind": "fourier", "cos": [0.0, 1.0], "sin": [0.0, 0.3],
                                           "length": 1.0},
                                          {"kind": "fourier", "cos": [0.0, 0.0, 0.6],
                                           "sin": [0.0, 0.5], "length": 1.0}]}
        base["schedule"].update(t_up=10.0, n_up=2, m_per_update=8)
    return base


def _merge(dst: dict, src: dict):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict) and k != "potential":
            _merge(dst[k], v)
        else:
            dst[k] = copy.deepcopy(v)


def _known_keys():
    top = {f.name for f in fields(RunConfig)} | {"t_total"}
    return top


def from_dict(raw: dict) -> RunConfig:
    """Fill defaults and validate; raises :class:`ConfigError` listing every problem."""
    errors = []
    if not isinstance(raw, dict):
        raise ConfigError([("<root>", "config must be a JSON object")])
    if "experiment" not in raw:
        errors.append(("experiment", f"required field missing (one of {', '.join(EXPERIMENTS)})"))
    if "seed" not in raw:
        errors.append(("seed", "required field missing (integer master seed; there is no "
                               "wall-clock fallback)"))
    if errors:
        raise ConfigError(errors)
    exp = raw["experiment"]
    if exp not in EXPERIMENTS:
        raise ConfigError([("experiment", f"must be one of {', '.join(EXPERIMENTS)}, got {exp!r}")])
    for k in raw:
        if k not in _known_keys():
            errors.append((k, "unknown field"))
    for sec, cls in _SECTIONS.items():
        if isinstance(raw.get(sec), dict):
            names = {f.name for f in fields(cls)}
            errors.extend((f"{sec}.{k}", "unknown field") for k in raw[sec] if k not in names)
        elif sec in raw:
            errors.append((sec, "must be an object"))
    if errors:
        raise ConfigError(errors)
    d = _defaults(exp)
    _merge(d, {k: v for k, v in raw.items() if k not in ("experiment", "seed", "t_total")})
    if "t_total" in raw:
        t_total = raw["t_total"]
        if not (isinstance(t_total, (int, float)) and t_total > 0):
            raise ConfigError([("t_total", "must be a positive number")])
        n = t_total / d["schedule"]["t_up"]
        if abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) < 1:
            raise ConfigError([("t_total", f"must be a positive multiple of schedule.t_up "
                                            f"({d['schedule']['t_up']})")])
        d["schedule"]["n_up"] = int(round(n))
    if exp == "polymer" and d["schedule"].get("m_per_update") is None:
        d["schedule"]["m_per_update"] = 4 * int(d["potential"].get("n_polymer", 5))
    cfg = RunConfig(
        experiment=exp,
        seed=raw["seed"],
        potential=d["potential"],
        integrator=IntegratorSection(**d["integrator"]),
        n_replicas=d["n_replicas"],
        n_nodes=d["n_nodes"],
        kernel=KernelSection(**d["kernel"]),
        schedule=ScheduleSection(**d["schedule"]),
        als=ALSSection(**d["als"]),
        output=OutputSection(**d["output"]),
        initial_z=d["initial_z"],
    )
    validate(cfg)
    return cfg


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def validate(cfg: RunConfig):
    errors = []

    def need(cond, path, msg):
        if not cond:
            errors.append((path, msg))

    need(_is_int(cfg.seed) and cfg.seed >= 0, "seed", "must be a non-negative integer")
    it = cfg.integrator
    need(_is_num(it.dt) and it.dt > 0, "integrator.dt", "must be > 0")
    need(_is_int(it.record_stride) and it.record_stride >= 1, "integrator.record_stride", "must be an integer >= 1")
    need(_is_num(it.beta) and it.beta > 0, "integrator.beta", "must be > 0")
    need(_is_int(cfg.n_replicas) and cfg.n_replicas >= 1, "n_replicas", "must be an integer >= 1")
    need(_is_int(cfg.n_nodes) and cfg.n_nodes >= 3, "n_nodes", "must be an integer >= 3")
    k = cfg.kernel
    need(k.mode in ("grid_delta", "von_mises"), "kernel.mode", "must be 'grid_delta' or 'von_mises'")
    need(_is_num(k.lam) and k.lam >= 0, "kernel.lam", "must be >= 0")
    if k.mode == "grid_delta" and _is_num(k.lam):
        need(k.lam > 0, "kernel.lam",
             "must be > 0 with the grid_delta kernel: the minimisation needs either a positive "
             "kernel or a positive regularisation to be well posed")
    if k.mode == "von_mises":
        need(_is_num(k.eps) and k.eps > 0, "kernel.eps", "must be > 0 for the von_mises kernel")
    s = cfg.schedule
    need(_is_num(s.t_up) and s.t_up > 0, "schedule.t_up", "must be > 0")
    if _is_num(s.t_up) and s.t_up > 0 and not errors:
        n = s.t_up / (it.dt * it.record_stride)
        need(abs(n - round(n)) <= 1e-9 * max(1.0, n) and round(n) >= 1, "schedule.t_up",
             f"must be a positive multiple of record_stride*dt = {it.dt * it.record_stride}")
    need(_is_int(s.n_up) and s.n_up >= 1, "schedule.n_up", "must be an integer >= 1")
    need(_is_int(s.m_per_update) and s.m_per_update >= 0, "schedule.m_per_update", "must be an integer >= 0")
    need(s.weight_mode in ("unweighted", "reweighted"), "schedule.weight_mode",
         "must be 'unweighted' or 'reweighted'")
    need(isinstance(s.gabf_baseline, bool), "schedule.gabf_baseline", "must be true or false")
    need(_is_num(s.gabf_threshold) and s.gabf_threshold > 0, "schedule.gabf_threshold", "must be > 0")
    need(_is_int(cfg.als.max_sweeps) and cfg.als.max_sweeps >= 1, "als.max_sweeps", "must be an integer >= 1")
    need(_is_num(cfg.als.rel_tol) and cfg.als.rel_tol > 0, "als.rel_tol", "must be > 0")
    need(_is_int(cfg.output.hist_bins) and cfg.output.hist_bins >= 1, "output.hist_bins", "must be an integer >= 1")
    try:
        pot = cfg.build_potential()
    except (TypeError, ValueError, KeyError) as exc:
        errors.append(("potential", str(exc)))
        pot = None
    if pot is not None:
        kind = cfg.potential.get("kind")
        expected = {"toy": "toy", "polymer": "polymer", "separable-test": "separable"}.get(cfg.experiment)
        if expected is not None:
            need(kind == expected, "potential.kind", f"must be {expected!r} for experiment {cfg.experiment!r}")
        if cfg.initial_z is not None:
            need(isinstance(cfg.initial_z, list) and len(cfg.initial_z) == pot.box().dim_z,
                 "initial_z", f"must be a list of {pot.box().dim_z} numbers")
    if errors:
        raise ConfigError(errors)


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    if not text.strip():
        raise ConfigError([("experiment", "required field missing"), ("seed", "required field missing")])
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([("<root>", f"not valid JSON: {exc}")]) from exc
    return from_dict(raw)


def save_config(cfg: RunConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# presets

PRESETS = {
    "toy_beta1": {"experiment": "toy", "seed": 20240901, "t_total": 30.0},
    "toy_beta5": {"experiment": "toy", "seed": 20240905, "t_total": 100.0,
                  "integrator": {"beta": 5.0}},
    "separable": {"experiment": "separable-test", "seed": 7},
    "polymer_d3": {"experiment": "polymer", "seed": 31,
                   "potential": {"kind": "polymer", "n_particles": 25, "n_polymer": 3},
                   "n_replicas": 20, "schedule": {"t_up": 1000 * RECORD_DT, "n_up": 20}},
    "polymer_d5": {"experiment": "polymer", "seed": 5,
                   "potential": {"kind": "polymer", "n_particles": 100, "n_polymer": 5}},
}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    raw = copy.deepcopy(PRESETS[name])
    _merge(raw, overrides)
    return from_dict(raw)


def resolve(name_or_path) -> RunConfig:
    """A preset name or the path of a JSON config file."""
    p = Path(str(name_or_path))
    if str(name_or_path) in PRESETS and not p.exists():
        return preset(str(name_or_path))
    return load_config(p)

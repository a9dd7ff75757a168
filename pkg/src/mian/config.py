"""Experiment configuration: INI-style ``key = value`` files with sections.

Sections are ``experiment``, ``data``, ``model``, ``train``, ``schedule`` and
``probes``.  Only ``experiment.name`` and ``data.generator`` are required;
everything else falls back to the defaults of the dataclasses below.
"""
from __future__ import annotations

import configparser
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path

from mian.data import MOONS_CENTER, gen_rotated_moons, gen_shifted_gaussians, load_csv_domains, standardize_by_sources
from mian.errors import UsageError
from mian.objectives import Schedule
from mian.train import ARMS, OptimizerSpec, TrainConfig

GENERATORS = ("rotated_moons", "shifted_gaussians", "csv")
SECTIONS = ("experiment", "data", "model", "train", "schedule", "probes")


@dataclass
class DataSpec:
    generator: str
    n_per_domain: int = 2000
    angles: tuple = (0.0, 15.0, 30.0, 45.0, 60.0)
    noise_sd: float = 0.1
    center: tuple = tuple(MOONS_CENTER)
    n_classes: int = 2
    offsets: tuple = ()
    class_spread: float = 3.0
    test_fraction: float = 0.2
    csv_path: str = ""
    standardize: bool = True

    def build(self, seed, base_dir=Path(".")):
        if self.generator == "rotated_moons":
            ds = gen_rotated_moons(self.n_per_domain, self.angles, self.noise_sd, seed, self.test_fraction, self.center)
        elif self.generator == "shifted_gaussians":
            offsets = [tuple(float(x) for x in o.split(":")) for o in self.offsets]
            ds = gen_shifted_gaussians(
                self.n_per_domain, self.n_classes, offsets, seed, self.class_spread, self.noise_sd, self.test_fraction
            )
        else:
            path = Path(self.csv_path)
            if not path.is_absolute():
                path = base_dir / path
            ds = load_csv_domains(path, self.test_fraction, seed)
        return standardize_by_sources(ds) if self.standardize else ds


@dataclass
class ProbeToggles:
    mutual_information: bool = True
    proxy_a_distance: bool = True
    hdiv_mixture: bool = True
    svd_entropy: bool = True
    variance_step: int = 1000
    variance_batches: int = 64
    probe_steps: int = 400
    probe_rows: int = 400


@dataclass
class ExperimentConfig:
    name: str
    data: DataSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    probes: ProbeToggles = field(default_factory=ProbeToggles)
    arms: tuple = ("mian",)
    seeds: tuple = (0,)
    output_dir: str = "runs"
    source_text: str = ""
    source_path: str = ""

    def run_dir(self, arm, seed):
        base = Path(self.output_dir)
        if not base.is_absolute() and self.source_path:
            base = Path(self.source_path).parent / base
        return base / self.name / f"{arm}-seed{seed}"

    def train_config(self, seed):
        return replace(self.train, seed=seed)


# ---------------------------------------------------------------------------
# parsing


def _tuple_of(conv):
    def parse(text):
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(conv(p) for p in parts)

    return parse


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _converter(default):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        if default and isinstance(default[0], float):
            return _tuple_of(float)
        if default and isinstance(default[0], int):
            return _tuple_of(int)
        return _tuple_of(str)
    return str


def _fill(section, target_defaults, where, converters=None):
    """Convert the keys of one section against a dict of defaults."""
    out = {}
    converters = converters or {}
    for key, raw in section.items():
        if key not in target_defaults:
            raise UsageError(f"unknown field {where}.{key}")
        conv = converters.get(key) or _converter(target_defaults[key])
        try:
            out[key] = conv(raw)
        except ValueError as exc:
            raise UsageError(f"invalid value for {where}.{key}: {exc}") from None
    return out


def _defaults(cls, **overrides):
    values = {}
    for f in fields(cls):
        if f.default is not MISSING:
            values[f.name] = f.default
    values.update(overrides)
    return values


def _require(parser, section, key):
    if not parser.has_section(section) or not parser.get(section, key, fallback="").strip():
        raise UsageError(f"missing required field {section}.{key}")
    return parser.get(section, key).strip()


def parse_config(text, source_path=""):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source_path or "<config>")
    except configparser.Error as exc:
        raise UsageError(f"malformed config: {exc}") from None
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise UsageError(f"unknown section [{sec}]")

    name = _require(parser, "experiment", "name")
    generator = _require(parser, "data", "generator")
    if generator not in GENERATORS:
        raise UsageError(f"data.generator must be one of {GENERATORS}, got {generator!r}")

    exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    exp.pop("name")
    exp_vals = _fill(
        exp,
        {"arms": ("mian",), "seeds": (0,), "output_dir": "runs"},
        "experiment",
        {"arms": _tuple_of(str), "seeds": _tuple_of(int)},
    )
    for arm in exp_vals.get("arms", ()):
        if arm not in ARMS:
            raise UsageError(f"experiment.arms: unknown arm {arm!r}")

    data_sec = dict(parser["data"])
    data_defaults = _defaults(DataSpec, generator="")
    data_vals = _fill(data_sec, data_defaults, "data", {"offsets": _tuple_of(str), "center": _tuple_of(float)})
    data = DataSpec(**data_vals)
    if generator == "csv" and not data.csv_path:
        raise UsageError("missing required field data.csv_path")

    model_keys = {"encoder_hidden": (64, 64), "latent_dim": 32, "classifier_hidden": (64,), "disc_hidden": (64, 64)}
    train_defaults = _defaults(TrainConfig)
    train_vals = {}
    if parser.has_section("model"):
        train_vals.update(_fill(dict(parser["model"]), model_keys, "model"))
    opt_defaults = {f"optimizer_{k}": v for k, v in _defaults(OptimizerSpec).items()}
    if parser.has_section("train"):
        sec = dict(parser["train"])
        train_part = {k: v for k, v in sec.items() if not k.startswith("optimizer_")}
        opt_part = {k: v for k, v in sec.items() if k.startswith("optimizer_")}
        allowed = {k: v for k, v in train_defaults.items() if k not in model_keys and k not in ("seed", "n_classes")}
        train_vals.update(_fill(train_part, allowed, "train"))
        opt_vals = _fill(opt_part, opt_defaults, "train")
    else:
        opt_vals = {}
    optimizer = OptimizerSpec(**{k[len("optimizer_"):]: v for k, v in opt_vals.items()})
    sched_vals = {}
    if parser.has_section("schedule"):
        sched_vals = _fill(dict(parser["schedule"]), {"beta0": 1.0, "gamma0": 1e-4, "sigma": 10.0}, "schedule")
    train_vals["n_classes"] = data.n_classes
    train = TrainConfig(optimizer=optimizer, schedule=Schedule(**sched_vals), **train_vals)
    try:
        train.validate()
    except UsageError as exc:
        raise UsageError(f"invalid [train] section: {exc}") from None

    probe_vals = {}
    if parser.has_section("probes"):
        probe_vals = _fill(dict(parser["probes"]), _defaults(ProbeToggles), "probes")

    return ExperimentConfig(
        name=name,
        data=data,
        train=train,
        probes=ProbeToggles(**probe_vals),
        source_text=text,
        source_path=str(source_path),
        **exp_vals,
    )


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source_path=str(path))

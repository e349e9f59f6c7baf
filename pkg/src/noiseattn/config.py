"""Line-based experiment configuration: ``section.key = value`` pairs.

Blank lines and ``#`` comments are ignored; keys are dotted, values are
scalars or comma-separated lists. Unknown or duplicate keys are errors so
typos fail fast. The full key reference lives in the README.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .multihead import AttributeSpec
from .nn import Conv2D, Dense, Flatten, LayerSpec, MaxPool2x2, ReLU
from .data import SyntheticSpec
from .training import TrainSettings


def parse_config_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


# ---------------------------------------------------------------------------
# Architecture DSL


def parse_input_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"bad input shape {text!r}: {exc}") from exc
    if not shape or any(s < 1 for s in shape):
        raise ConfigError(f"input shape entries must be positive, got {text!r}")
    return shape


def serialize_input_shape(shape) -> str:
    return "x".join(str(s) for s in shape)


def parse_arch(text: str) -> list[LayerSpec]:
    """dense:IN:OUT | conv:INCH:OUTCH:KERNEL[:STRIDE] | relu | pool | flatten"""
    specs: list[LayerSpec] = []
    for token in (t.strip() for t in text.split(",")):
        if not token:
            continue
        parts = token.split(":")
        kind = parts[0].lower()
        try:
            if kind == "dense" and len(parts) == 3:
                specs.append(Dense(int(parts[1]), int(parts[2])))
            elif kind == "conv" and len(parts) in (4, 5):
                stride = int(parts[4]) if len(parts) == 5 else 1
                specs.append(Conv2D(int(parts[1]), int(parts[2]), int(parts[3]), stride))
            elif kind == "relu" and len(parts) == 1:
                specs.append(ReLU())
            elif kind == "pool" and len(parts) == 1:
                specs.append(MaxPool2x2())
            elif kind == "flatten" and len(parts) == 1:
                specs.append(Flatten())
            else:
                raise ConfigError(f"bad layer token {token!r}")
        except ValueError as exc:
            raise ConfigError(f"bad layer token {token!r}: {exc}") from exc
    if not specs:
        raise ConfigError("architecture has no layers")
    return specs


def serialize_arch(specs) -> str:
    tokens = []
    for spec in specs:
        if isinstance(spec, Dense):
            tokens.append(f"dense:{spec.in_dim}:{spec.out_dim}")
        elif isinstance(spec, Conv2D):
            tokens.append(f"conv:{spec.in_ch}:{spec.out_ch}:{spec.kernel}:{spec.stride}")
        elif isinstance(spec, ReLU):
            tokens.append("relu")
        elif isinstance(spec, MaxPool2x2):
            tokens.append("pool")
        elif isinstance(spec, Flatten):
            tokens.append("flatten")
        else:
            raise ConfigError(f"cannot serialize layer spec {spec!r}")
    return ",".join(tokens)


# ---------------------------------------------------------------------------
# Typed config


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | nld
    train_path: str | None = None
    test_path: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class NoiseConfig:
    mode: str = "none"  # none | uniform | matrix | per_class
    rho: tuple[float, ...] = (0.0,)
    matrix_path: str | None = None
    per_class: tuple[float, ...] | None = None
    seed: int | tuple | None = None  # defaults to (experiment seed, 37)


@dataclass
class NAConfig:
    pretrain_epochs: int = 10
    stage_epochs: int = 50
    max_units: int = 1
    patience: int = 4
    improvement_threshold: float = 1e-3
    decay_base: float = 1e-3
    decay_growth: float = 2.0
    init_jitter: float = 1e-3
    val_fraction: float = 0.1


@dataclass
class RecursionConfig:
    iterations: int = 0
    alpha_base: float = 0.8
    epochs: int | None = None  # defaults to na.stage_epochs
    min_improvement: float = 0.002  # 0.2 error points on the validation metric


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/experiment"
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    arch_input_shape: tuple[int, ...] | None = None
    arch_specs: list[LayerSpec] | None = None
    opt: TrainSettings = field(default_factory=TrainSettings)
    na: NAConfig = field(default_factory=NAConfig)
    recursion: RecursionConfig = field(default_factory=RecursionConfig)
    attributes: AttributeSpec | None = None
    echo: dict[str, str] = field(default_factory=dict)


class _Entries:
    """Tracks which keys were consumed so leftovers can be rejected."""

    def __init__(self, entries: dict[str, str]):
        self.entries = dict(entries)
        self.used: set[str] = set()

    def get(self, key, default=None):
        if key in self.entries:
            self.used.add(key)
            return self.entries[key]
        return default

    def get_int(self, key, default=None):
        raw = self.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc

    def get_float(self, key, default=None):
        raw = self.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc

    def get_floats(self, key, default=None):
        raw = self.get(key)
        if raw is None:
            return default
        try:
            return tuple(float(p) for p in raw.split(",") if p.strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: expected comma-separated numbers, got {raw!r}") from exc

    def reject_unknown(self):
        unknown = sorted(set(self.entries) - self.used)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


def _parse_attributes(raw: str) -> AttributeSpec:
    names, counts = [], []
    for token in (t.strip() for t in raw.split(",")):
        if not token:
            continue
        name, sep, count = token.partition(":")
        if not sep:
            raise ConfigError(f"attribute token {token!r} must be name:classes")
        try:
            counts.append(int(count))
        except ValueError as exc:
            raise ConfigError(f"attribute token {token!r}: {exc}") from exc
        names.append(name.strip())
    return AttributeSpec(counts, names)


def build_config(entries: dict[str, str]) -> ExperimentConfig:
    e = _Entries(entries)
    cfg = ExperimentConfig(echo=dict(entries))

    cfg.seed = e.get_int("seed", 0)
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    cfg.out_dir = e.get("out", cfg.out_dir)

    attrs = e.get("attributes")
    if attrs:
        cfg.attributes = _parse_attributes(attrs)

    # data
    d = cfg.data
    d.source = e.get("data.source", d.source)
    if d.source not in ("synthetic", "nld"):
        raise ConfigError(f"data.source must be synthetic or nld, got {d.source!r}")
    d.train_path = e.get("data.train_path", d.train_path)
    d.test_path = e.get("data.test_path", d.test_path)
    syn = d.synthetic
    kind = e.get("data.synthetic.kind", syn.kind)
    syn_seed = e.get_int("data.synthetic.seed")
    d.synthetic = SyntheticSpec(
        kind=kind,
        classes=e.get_int("data.synthetic.classes", syn.classes),
        dim=e.get_int("data.synthetic.dim", syn.dim),
        sigma=e.get_float("data.synthetic.sigma", syn.sigma),
        separation=e.get_float("data.synthetic.separation", syn.separation),
        height=e.get_int("data.synthetic.height", syn.height),
        width=e.get_int("data.synthetic.width", syn.width),
        n_train=e.get_int("data.synthetic.n_train", syn.n_train),
        n_test=e.get_int("data.synthetic.n_test", syn.n_test),
        seed=syn_seed if syn_seed is not None else (cfg.seed, 31),
    )

    # noise
    n = cfg.noise
    n.mode = e.get("noise.mode", n.mode)
    if n.mode not in ("none", "uniform", "matrix", "per_class"):
        raise ConfigError(f"unknown noise.mode {n.mode!r}")
    n.rho = e.get_floats("noise.rho", n.rho)
    n.matrix_path = e.get("noise.matrix_path", n.matrix_path)
    n.per_class = e.get_floats("noise.per_class", n.per_class)
    noise_seed = e.get_int("noise.seed")
    n.seed = noise_seed if noise_seed is not None else (cfg.seed, 37)

    # architecture
    shape_raw = e.get("arch.input_shape")
    if shape_raw is not None:
        cfg.arch_input_shape = parse_input_shape(shape_raw)
    layers_raw = e.get("arch.layers")
    if layers_raw is not None:
        cfg.arch_specs = parse_arch(layers_raw)

    # optimizer
    cfg.opt = TrainSettings(
        lr=e.get_float("opt.lr", cfg.opt.lr),
        momentum=e.get_float("opt.momentum", cfg.opt.momentum),
        weight_decay=e.get_float("opt.weight_decay", cfg.opt.weight_decay),
        batch_size=e.get_int("opt.batch_size", cfg.opt.batch_size),
    )

    # attention schedule
    na = cfg.na
    na.pretrain_epochs = e.get_int("na.pretrain_epochs", na.pretrain_epochs)
    na.stage_epochs = e.get_int("na.stage_epochs", na.stage_epochs)
    na.max_units = e.get_int("na.max_units", na.max_units)
    na.patience = e.get_int("na.patience", na.patience)
    na.improvement_threshold = e.get_float("na.improvement_threshold", na.improvement_threshold)
    na.decay_base = e.get_float("na.decay_base", na.decay_base)
    na.decay_growth = e.get_float("na.decay_growth", na.decay_growth)
    na.init_jitter = e.get_float("na.init_jitter", na.init_jitter)
    na.val_fraction = e.get_float("na.val_fraction", na.val_fraction)
    if na.stage_epochs < 0:
        raise ConfigError("na.stage_epochs must be >= 0")
    if not 0.0 <= na.val_fraction < 1.0:
        raise ConfigError("na.val_fraction must lie in [0, 1)")

    # recursion
    r = cfg.recursion
    r.iterations = e.get_int("recursion.iterations", r.iterations)
    if r.iterations < 0:
        raise ConfigError("recursion.iterations must be >= 0")
    r.alpha_base = e.get_float("recursion.alpha_base", r.alpha_base)
    if not 0.0 < r.alpha_base <= 1.0:
        raise ConfigError("recursion.alpha_base must lie in (0, 1]")
    r.epochs = e.get_int("recursion.epochs", r.epochs)
    r.min_improvement = e.get_float("recursion.min_improvement", r.min_improvement)

    e.reject_unknown()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"no such config file: {path}") from exc
    return build_config(parse_config_text(text))


def validate_paths(cfg: ExperimentConfig):
    """Referenced input paths must exist before a run starts."""
    for label, p in (("data.train_path", cfg.data.train_path),
                     ("data.test_path", cfg.data.test_path),
                     ("noise.matrix_path", cfg.noise.matrix_path)):
        if p is not None and not Path(p).exists():
            raise ConfigError(f"{label}: no such file {p!r}")


def load_noise_matrix(path) -> np.ndarray:
    try:
        m = np.loadtxt(path, delimiter=",", dtype=np.float64)
    except Exception as exc:
        raise ConfigError(f"could not read noise matrix {path!r}: {exc}") from exc
    return np.atleast_2d(m)

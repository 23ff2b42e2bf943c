"""Line-based ``key = value`` experiment configuration.

Comments start with ``#``. Values are integers, reals, ``true``/``false``,
bare strings or comma-separated lists. Per-method overrides use a dotted key,
e.g. ``grad_ascent.lr = 0.1`` or ``scrub.epochs = 6``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

from .speechgen import TASKS, GenSpec
from .unlearn import METHOD_DEFAULTS, METHODS, TrainSettings, UnlearnConfig

SWEEP_RATIOS = (0.01, 0.05, 0.10)
FULL_SWEEP_RATIOS = tuple(round(0.01 * i, 2) for i in range(1, 11))
OVERRIDABLE = ("lr", "epochs", "lambda", "gamma", "batch_size")


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


@dataclass
class ExperimentConfig:
    # corpus
    num_keywords: int = 12
    num_speakers: int = 20
    frames: int = 10
    feature_dim: int = 32
    samples_per_class: int = 50
    noise_sigma: float = 2.0
    keyword_scale: float = 3.0
    speaker_scale: float = 1.0
    data_seed: int = 0
    test_fraction: float = 0.2
    corpus_path: str = ""
    # original model
    hidden_dims: list = field(default_factory=lambda: [64, 32])
    activation: str = "relu"
    train_epochs: int = 30
    train_lr: float = 0.1
    train_batch_size: int = 32
    train_seed: int = 0
    # unlearning
    methods: list = field(default_factory=lambda: list(METHODS))
    epochs: int | None = None  # None: per-method default
    lr: float | None = None
    batch_size: int = 32
    gamma: float = 0.5
    scrub_lambda: float = 1.0
    superloss: bool = False
    superloss_rows: bool = False  # extra "<base>+superloss" rows in the sweep
    superloss_base: str = "grad_ascent"
    sl_lambda: float = 1.0
    sl_ema: float = 0.9
    time_budget_seconds: float = 0.0
    # forgetting protocol
    tasks: list = field(default_factory=lambda: list(TASKS))
    forget_ratios: list = field(default_factory=lambda: list(SWEEP_RATIOS))
    full_sweep: bool = False
    class_unlearning: bool = True
    forget_class: int = 0
    # run
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "results"
    workers: int = 1
    save_checkpoints: bool = True
    method_overrides: dict = field(default_factory=dict)

    def gen_spec(self):
        return GenSpec(self.num_keywords, self.num_speakers, self.frames, self.feature_dim,
                       self.samples_per_class, self.noise_sigma, self.keyword_scale,
                       self.speaker_scale, self.data_seed)

    def train_settings(self):
        return TrainSettings(tuple(self.hidden_dims), self.train_epochs, self.train_lr,
                             self.train_batch_size, self.activation)

    def ratios(self):
        return list(FULL_SWEEP_RATIOS) if self.full_sweep else list(self.forget_ratios)

    def unlearn_config(self, method, seed, superloss=None):
        kw = dict(METHOD_DEFAULTS[method])
        kw.update(method=method, batch_size=self.batch_size, gamma=self.gamma, seed=seed,
                  superloss_enabled=self.superloss if superloss is None else superloss,
                  sl_lambda=self.sl_lambda, sl_ema=self.sl_ema)
        if method == "scrub":
            kw["lam"] = self.scrub_lambda
        if self.epochs is not None:
            kw["epochs"] = self.epochs
        if self.lr is not None:
            kw["lr"] = self.lr
        if self.time_budget_seconds > 0:
            kw["time_budget_seconds"] = self.time_budget_seconds
        for k, v in self.method_overrides.get(method, {}).items():
            kw["lam" if k == "lambda" else k] = v
        cfg = UnlearnConfig(**kw)
        cfg.validate()
        return cfg

    def to_text(self):
        lines = []
        for f in fields(self):
            if f.name == "method_overrides":
                continue
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {_fmt(v)}")
        for method, ov in sorted(self.method_overrides.items()):
            for k, v in sorted(ov.items()):
                lines.append(f"{method}.{k} = {_fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


_LIST_TYPES = {
    "hidden_dims": int,
    "methods": str,
    "tasks": str,
    "forget_ratios": float,
    "seeds": int,
}
_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_FIELD_TYPES.update(epochs=int, lr=float)


def _convert(raw, typ, key, line):
    raw = raw.strip()
    try:
        if typ in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        return raw
    except ValueError:
        name = typ if isinstance(typ, str) else typ.__name__
        raise ConfigError(f"expected {name}, got {raw!r}", key, line) from None


def parse_config(text):
    """Parse and validate; absent keys keep their defaults."""
    cfg = ExperimentConfig()
    values, overrides, where = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (p.strip() for p in body.split("=", 1))
        if "." in key:
            method, opt = key.split(".", 1)
            if method not in METHODS or opt not in OVERRIDABLE:
                raise ConfigError("unknown key", key, lineno)
            typ = int if opt in ("epochs", "batch_size") else float
            overrides.setdefault(method, {})[opt] = _convert(value, typ, key, lineno)
        elif key in _LIST_TYPES:
            items = [v for v in value.split(",") if v.strip()]
            values[key] = [_convert(v, _LIST_TYPES[key], key, lineno) for v in items]
        elif key in _FIELD_TYPES and key != "method_overrides":
            values[key] = _convert(value, _FIELD_TYPES[key], key, lineno)
        else:
            raise ConfigError("unknown key", key, lineno)
        where[key] = lineno
    cfg = replace(cfg, **values, method_overrides=overrides)
    validate(cfg, where)
    return cfg


def validate(cfg, where=None):
    where = where or {}

    def need(ok, key, message):
        if not ok:
            raise ConfigError(message, key, where.get(key))

    for k in ("num_keywords", "num_speakers", "frames", "feature_dim", "samples_per_class",
              "train_batch_size", "batch_size", "workers"):
        need(getattr(cfg, k) >= 1, k, "must be >= 1")
    need(cfg.train_epochs >= 0, "train_epochs", "must be >= 0")
    need(cfg.noise_sigma >= 0, "noise_sigma", "must be >= 0")
    need(cfg.keyword_scale > 0, "keyword_scale", "must be positive")
    need(cfg.speaker_scale > 0, "speaker_scale", "must be positive")
    need(0 < cfg.test_fraction < 1, "test_fraction", "must be in (0, 1)")
    need(all(h >= 1 for h in cfg.hidden_dims), "hidden_dims", "all dims must be >= 1")
    need(cfg.activation in ("relu", "tanh"), "activation", "must be relu or tanh")
    need(cfg.train_lr > 0, "train_lr", "must be positive")
    need(cfg.epochs is None or cfg.epochs >= 0, "epochs", "must be >= 0")
    need(cfg.lr is None or cfg.lr > 0, "lr", "must be positive")
    need(len(cfg.methods) > 0, "methods", "must not be empty")
    for m in cfg.methods:
        need(m in METHODS, "methods", f"unknown method {m!r}; valid methods: {', '.join(METHODS)}")
    need(cfg.superloss_base in METHODS and cfg.superloss_base != "retrain", "superloss_base",
         "must name an unlearning method")
    need(0.0 <= cfg.gamma <= 1.0, "gamma", "gamma must be in [0, 1]")
    need(cfg.scrub_lambda >= 0, "scrub_lambda", "must be >= 0")
    need(cfg.sl_lambda > 0, "sl_lambda", "must be positive")
    need(0 < cfg.sl_ema <= 1, "sl_ema", "must be in (0, 1]")
    need(cfg.time_budget_seconds >= 0, "time_budget_seconds", "must be >= 0 (0 = use retrain time)")
    need(len(cfg.tasks) > 0 and all(t in TASKS for t in cfg.tasks), "tasks", f"must be from {TASKS}")
    need(all(0.0 <= r <= 0.10 for r in cfg.forget_ratios), "forget_ratios", "ratios must be in [0, 0.10]")
    need(len(cfg.seeds) > 0, "seeds", "must not be empty")
    need(cfg.forget_class >= 0, "forget_class", "must be >= 0")
    for method, ov in cfg.method_overrides.items():
        for k, v in ov.items():
            key = f"{method}.{k}"
            if k == "gamma":
                need(0.0 <= v <= 1.0, key, "gamma must be in [0, 1]")
            elif k in ("lambda", "epochs"):
                need(v >= 0, key, "must be >= 0")
            else:
                need(v > 0, key, "must be positive")
    return cfg

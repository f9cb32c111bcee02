"""Flat dotted-key run configuration.

A config file holds ``key = value`` lines (``#`` starts a comment). Every key
must appear in ``SCHEMA`` and every value is parsed by the schema type, so a
typo fails loudly instead of silently keeping a default. ``--set key=value``
overrides use the same parser.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    kind: str        # int | float | bool | str | ints | floats
    default: object
    help: str = ""
    choices: tuple = ()
    length: int | None = None   # fixed tuple length for ints/floats


def _f(kind, default, help="", choices=(), length=None):
    return Field(kind, default, help, choices, length)


SCHEMA: dict[str, Field] = {
    "run.seed": _f("int", 0, "training seed (init, sampling, augmentation)"),
    "run.output_dir": _f("str", "runs/default", "where artifacts are written"),
    "run.checkpoint_every": _f("int", 100, "steps between checkpoints (0 = only at the end)"),
    "run.max_skipped": _f("int", 10, "non-finite steps tolerated before a numeric failure"),

    "data.manifest": _f("str", "", "dataset manifest; empty = generate in memory from data.*"),
    "data.seed": _f("int", 0, "generator seed"),
    "data.count": _f("int", 40, "training volumes (labeled + unlabeled)"),
    "data.test_count": _f("int", 20, "held-out test volumes"),
    "data.slices": _f("int", 12),
    "data.height": _f("int", 64),
    "data.width": _f("int", 64),
    "data.num_classes": _f("int", 2),
    "data.labeled_fraction": _f("float", 0.1),

    "model.widths": _f("ints", (8, 16, 24, 32)),
    "model.strides": _f("ints", (1, 2, 4, 8)),
    "model.stem_width": _f("int", 8),
    "model.prompt_sigma": _f("float", 0.75),
    "model.use_dfe": _f("bool", True),
    "model.dtype": _f("str", "float32", choices=("float32", "float64")),

    "augment.scale_range": _f("floats", (0.5, 2.0), length=2),
    "augment.flip_prob": _f("float", 0.5),
    "augment.crop_size": _f("int", 0, "0 keeps the input size"),
    "augment.jitter_prob": _f("float", 0.8),
    "augment.brightness": _f("float", 0.25),
    "augment.contrast": _f("float", 0.25),
    "augment.gamma": _f("float", 0.25),
    "augment.gray_prob": _f("float", 0.2),
    "augment.blur_prob": _f("float", 0.5),
    "augment.blur_sigma": _f("floats", (0.1, 2.0), length=2),
    "augment.cutmix_prob": _f("float", 0.5),
    "augment.cutmix_area": _f("floats", (0.02, 0.4), length=2),
    "augment.cutmix_aspect": _f("floats", (0.3, 1 / 0.3), length=2),
    "augment.dropout_p": _f("float", 0.5, "complementary channel dropout rate"),

    "trainer.steps": _f("int", 400),
    "trainer.warmup_steps": _f("int", 20),
    "trainer.peak_lr": _f("float", 1e-4),
    "trainer.beta1": _f("float", 0.9),
    "trainer.beta2": _f("float", 0.999),
    "trainer.eps": _f("float", 1e-8),
    "trainer.weight_decay": _f("float", 0.01),
    "trainer.ema_max": _f("float", 0.999),
    "trainer.labeled_batch": _f("int", 2, "labeled frame pairs per step"),
    "trainer.unlabeled_batch": _f("int", 2, "unlabeled frame pairs per step (0 = supervised only)"),
    "trainer.prompt_prob": _f("float", 0.5),
    "trainer.pseudo_source": _f("str", "teacher", choices=("teacher", "student")),
    "trainer.dfe_pairing": _f("str", "strong", choices=("strong", "weak")),
    "trainer.refresh_every": _f("int", 50, "steps between PCSW prompt refreshes"),
    "trainer.unsup_start": _f("int", 0, "labeled-only burn-in steps"),

    "pcsw.enabled": _f("bool", True, "false = raw unvalidated pseudo-mask prompts"),
    "pcsw.tau": _f("float", 0.8),
    "pcsw.per_class": _f("bool", True),
    "pcsw.strict_band": _f("bool", False),

    "eval.model": _f("str", "teacher", choices=("teacher", "student")),
    "eval.use_prompts": _f("bool", True),
}

# keys that do not change results and are left out of the hash
UNHASHED = frozenset({"run.output_dir", "run.checkpoint_every"})

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_value(key: str, text) -> object:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    fld = SCHEMA[key]
    if not isinstance(text, str):
        return check_value(key, text)
    t = text.strip()
    try:
        if fld.kind == "int":
            val = int(t)
        elif fld.kind == "float":
            val = float(t)
        elif fld.kind == "bool":
            low = t.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(f"not a boolean: {t!r}")
            val = low in _TRUE
        elif fld.kind == "str":
            val = t
        elif fld.kind == "ints":
            val = tuple(int(x) for x in t.replace("(", "").replace(")", "").split(",") if x.strip())
        elif fld.kind == "floats":
            val = tuple(float(x) for x in t.replace("(", "").replace(")", "").split(",") if x.strip())
        else:  # pragma: no cover
            raise AssertionError(fld.kind)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {t!r} as {fld.kind}: {exc}") from None
    return check_value(key, val)


def check_value(key: str, val) -> object:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    fld = SCHEMA[key]
    kinds = {"int": int, "float": (int, float), "bool": bool, "str": str,
             "ints": (tuple, list), "floats": (tuple, list)}
    if fld.kind in ("int", "float") and isinstance(val, bool):
        raise ConfigError(f"{key}: expected {fld.kind}, got bool")
    if not isinstance(val, kinds[fld.kind]):
        raise ConfigError(f"{key}: expected {fld.kind}, got {type(val).__name__}")
    if fld.kind == "float":
        val = float(val)
    if fld.kind in ("ints", "floats"):
        conv = int if fld.kind == "ints" else float
        val = tuple(conv(x) for x in val)
        if fld.length is not None and len(val) != fld.length:
            raise ConfigError(f"{key}: expected {fld.length} values, got {len(val)}")
    if fld.choices and val not in fld.choices:
        raise ConfigError(f"{key}: {val!r} not in {fld.choices}")
    return val


class RunConfig:
    """Resolved configuration: schema defaults overlaid with file values and overrides."""

    def __init__(self, values: dict | None = None):
        self._values = {k: f.default for k, f in SCHEMA.items()}
        for k, v in (values or {}).items():
            self._values[k] = check_value(k, v)
        self._validate()

    def _validate(self):
        v = self._values
        if not 0.0 <= v["pcsw.tau"] <= 1.0:
            raise ConfigError(f"pcsw.tau must be in [0, 1], got {v['pcsw.tau']}")
        if not 0.0 < v["data.labeled_fraction"] <= 1.0:
            raise ConfigError("data.labeled_fraction must be in (0, 1]")
        if v["trainer.steps"] < 1:
            raise ConfigError("trainer.steps must be >= 1")
        if not 0 <= v["trainer.warmup_steps"] < v["trainer.steps"]:
            raise ConfigError("trainer.warmup_steps must be in [0, trainer.steps)")
        if v["trainer.labeled_batch"] < 1 or v["trainer.unlabeled_batch"] < 0:
            raise ConfigError("batch sizes: labeled >= 1, unlabeled >= 0")
        if v["trainer.refresh_every"] < 1:
            raise ConfigError("trainer.refresh_every must be >= 1")
        if not 0.0 <= v["augment.dropout_p"] <= 0.5:
            raise ConfigError("augment.dropout_p must be in [0, 0.5]")
        if len(v["model.widths"]) != len(v["model.strides"]):
            raise ConfigError("model.widths and model.strides need the same length")

    def __getitem__(self, key):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def items(self):
        return sorted(self._values.items())

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.items()}

    def replace(self, **dotted) -> "RunConfig":
        vals = dict(self._values)
        for k, v in dotted.items():
            vals[k] = check_value(k, v)
        return RunConfig(vals)

    def with_overrides(self, overrides) -> "RunConfig":
        """Apply ``key=value`` strings."""
        vals = dict(self._values)
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, t = item.split("=", 1)
            vals[k.strip()] = parse_value(k.strip(), t)
        return RunConfig(vals)

    def hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in UNHASHED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def dumps(self) -> str:
        lines = [f"# config_hash = {self.hash()}"]
        for k, v in self.items():
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        k, t = line.split("=", 1)
        k = k.strip()
        if k in values:
            raise ConfigError(f"{source}:{n}: duplicate key {k!r}")
        try:
            values[k] = parse_value(k, t)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{n}: {exc}") from None
    return values


def load_config(path=None, overrides=None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values = parse_config_text(text, str(path))
    return RunConfig(values).with_overrides(overrides)

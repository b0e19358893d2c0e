"""Flat ``key = value`` run configuration.

One assignment per line, ``#`` starts a comment, blank lines are ignored.
Every key has a type and a default; unknown keys and unparseable or invalid
values raise :class:`ConfigError` naming the key.  The resolved snapshot
written by :func:`dump_config` parses back to the same values.
"""

import math
from dataclasses import dataclass

from .losses import SIGMA_POLICIES, STRATEGIES, DistillConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0 and math.isfinite(v)


def _choice(options):
    def check(v):
        return v in options
    check.options = options
    return check


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: object
    check: object = None
    doc: str = ""


KEYS = [
    # run
    Key("seed", int, 0, _nonneg, "seed for initialization and batch order"),
    Key("epochs", int, 20, _positive),
    Key("m", int, 128, _positive, "mini-batch size"),
    Key("optimizer", str, "rmsprop", _choice(("rmsprop", "sgd"))),
    Key("lr", float, 1e-3, _positive),
    Key("rho", float, 0.9, lambda v: 0 <= v < 1, "RMSProp squared-gradient decay"),
    Key("momentum", float, 0.0, lambda v: 0 <= v < 1, "sgd only"),
    Key("weight_decay", float, 0.0, _nonneg),
    Key("lr_step", int, 0, _nonneg, "epochs between learning-rate decays; 0 disables"),
    Key("lr_decay", float, 0.1, _positive),
    Key("eval_every", int, 1, _positive),
    Key("cache_teacher", bool, True),
    # objective
    Key("strategy", str, "lp", _choice(STRATEGIES)),
    Key("k", int, 5, _positive, "neighbors per sample in the affinity graph"),
    Key("gamma", float, 1.0, _nonneg, "LP loss weight"),
    Key("lambda", float, 2.0, _nonneg, "soft-target loss weight"),
    Key("tau", float, 0.5, _positive, "softmax temperature"),
    Key("sigma_policy", str, "batch_mean", _choice(SIGMA_POLICIES)),
    Key("sigma", float, 1.0, _positive, "kernel width for sigma_policy = fixed"),
    Key("one_sided", bool, False, None,
        "unsymmetrized graph and the one-sided per-sample gradient"),
    Key("fitnet_stage1_frac", float, 1 / 3, lambda v: 0 < v < 1),
    # data and models
    Key("dataset", str, "mnist", _choice(("mnist", "blobs"))),
    Key("mnist_dir", str, "data/mnist"),
    Key("train_size", int, 10000, _nonneg, "training subset size; 0 keeps all"),
    Key("val_size", int, 5000, _nonneg, "samples held out from the end of the training split"),
    Key("blobs_classes", int, 4, lambda v: v >= 2),
    Key("blobs_per_class", int, 200, _positive),
    Key("blobs_dim", int, 16, _positive),
    Key("blobs_spread", float, 1.0, _positive),
    Key("teacher_arch", str, "mnist-teacher"),
    Key("student_arch", str, "mnist-student"),
    Key("init", str, "scaled", _choice(("scaled", "uniform"))),
    Key("teacher_ckpt", str, ""),
]
SCHEMA = {k.name: k for k in KEYS}


def defaults():
    return {k.name: k.default for k in KEYS}


def parse_value(key, text):
    """Convert ``text`` to the type of ``key`` and validate it."""
    if key not in SCHEMA:
        raise ConfigError(key, "unknown key")
    spec = SCHEMA[key]
    text = str(text).strip()
    try:
        if spec.kind is bool:
            value = _bool(text)
        elif spec.kind is int:
            value = int(text)
        elif spec.kind is float:
            value = float(text)
        else:
            value = text
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {spec.kind.__name__}") from None
    if spec.check is not None and not spec.check(value):
        options = getattr(spec.check, "options", None)
        hint = f"; expected one of {', '.join(options)}" if options else ""
        raise ConfigError(key, f"invalid value {text!r}{hint}")
    return value


def parse_text(text, source="<config>"):
    """Parse config text into a ``{key: raw string}`` dict."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, f"unknown key ({source}:{lineno})")
        raw[key] = value
    return raw


def parse_config(path=None, overrides=None):
    """Resolve a config file plus overrides against the defaults.

    ``overrides`` maps keys to strings or typed values and wins over the
    file.  Returns a plain dict holding every key.
    """
    values = defaults()
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw.update(parse_text(fh.read(), str(path)))
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read config file ({exc.strerror})") from None
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value if isinstance(value, str) else _format(value)
    for key, text in raw.items():
        values[key] = parse_value(key, text)
    check_invariants(values)
    return values


def check_invariants(values):
    if values["strategy"] == "lp" and values["gamma"] and values["m"] < values["k"] + 1:
        raise ConfigError("m", f"batch size {values['m']} must exceed k={values['k']}")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(values):
    """Serialize every key, one per line, in schema order."""
    lines = []
    for spec in KEYS:
        lines.append(f"{spec.name} = {_format(values[spec.name])}")
    return "\n".join(lines) + "\n"


def distill_config(values):
    return DistillConfig(tau=values["tau"], lam=values["lambda"], gamma=values["gamma"],
                         k=values["k"], sigma_policy=values["sigma_policy"],
                         sigma=values["sigma"], strategy=values["strategy"],
                         one_sided=values["one_sided"])


def train_config(values):
    return TrainConfig(epochs=values["epochs"], batch_size=values["m"], seed=values["seed"],
                       optimizer=values["optimizer"], lr=values["lr"], rho=values["rho"],
                       momentum=values["momentum"], weight_decay=values["weight_decay"],
                       lr_step=values["lr_step"], lr_decay=values["lr_decay"],
                       eval_every=values["eval_every"],
                       fitnet_stage1_frac=values["fitnet_stage1_frac"],
                       cache_teacher=values["cache_teacher"],
                       distill=distill_config(values))

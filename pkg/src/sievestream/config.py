"""Flat ``section.key = value`` configuration files.

Sections are objective, selector, simulator and harness. Lines starting with
``#`` are comments. The canonical form is one ``key = value`` line per key in
sorted order with normalized values; ``dumps(loads(text))`` reproduces it.
"""

from __future__ import annotations

import math

from .algorithms import SIEVE_ALGORITHMS, SelectorConfig
from .errors import ConfigError, SieveStreamError
from .objective import KernelSpec, ObjectiveSpec
from .simulator import PeculiaritySpec, WorldSpec, full_scale_preset

_FLOAT = "float"
_INT = "int"
_STR = "str"
_BOOL = "bool"
_INTS = "ints"
_FLOATS = "floats"
_STRS = "strs"

SCHEMA = {
    "objective.lambda_i": _FLOAT,
    "objective.lambda_d": _FLOAT,
    "objective.alpha": _FLOAT,
    "objective.informativeness": _STR,
    "objective.detection_lambda": _FLOAT,
    "objective.kernel": _STR,
    "objective.beta": _FLOAT,
    "selector.algorithm": _STR,
    "selector.k": _INT,
    "selector.epsilon": _FLOAT,
    "selector.t": _INT,
    "selector.seed": _INT,
    "simulator.preset": _STR,
    "simulator.classes": _INT,
    "simulator.feature_dim": _INT,
    "simulator.centroid_spread": _FLOAT,
    "simulator.cluster_sigma": _FLOAT,
    "simulator.softmax_sharpness": _FLOAT,
    "simulator.nonobject_shrink": _FLOAT,
    "simulator.nonobject_offset": _FLOAT,
    "simulator.seed": _INT,
    "simulator.imbalance_factor": _INT,
    "simulator.imbalanced_fraction": _FLOAT,
    "simulator.replication": _INT,
    "simulator.noise_sigma": _FLOAT,
    "simulator.nonobject_count": _INT,
    "simulator.round_size": _INT,
    "simulator.rounds": _INT,
    "harness.algorithms": _STRS,
    "harness.epsilons": _FLOATS,
    "harness.ks": _INTS,
    "harness.t": _INT,
    "harness.seeds": _INTS,
    "harness.divide_k": _INT,
    "harness.cache": _BOOL,
    "harness.timing": _BOOL,
    "harness.rounds": _INT,
    "harness.iterations": _INT,
}


def _parse_value(key, kind, raw):
    raw = raw.strip()
    try:
        if kind == _FLOAT:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
            return value
        if kind == _INT:
            return int(raw)
        if kind == _BOOL:
            if raw.lower() in ("on", "true", "yes", "1"):
                return True
            if raw.lower() in ("off", "false", "no", "0"):
                return False
            raise ValueError
        if kind == _STR:
            if not raw:
                raise ValueError
            return raw
        items = [item.strip() for item in raw.split(",") if item.strip()]
        if kind == _INTS:
            return [int(x) for x in items]
        if kind == _FLOATS:
            return [float(x) for x in items]
        return items
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def _format_value(kind, value) -> str:
    if kind == _FLOAT:
        return repr(float(value))
    if kind == _BOOL:
        return "on" if value else "off"
    if kind == _FLOATS:
        return ", ".join(repr(float(v)) for v in value)
    if kind in (_INTS, _STRS):
        return ", ".join(str(v) for v in value)
    return str(value)


def loads(text: str) -> dict:
    config = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        # no value contains '#', so everything after it is a comment
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip().lower()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in config:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        config[key] = _parse_value(key, SCHEMA[key], raw)
    return config


def dumps(config: dict) -> str:
    lines = []
    for key in sorted(config):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        lines.append(f"{key} = {_format_value(SCHEMA[key], config[key])}")
    return "\n".join(lines) + "\n"


def load(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return loads(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _wrap(build):
    def inner(*args, **kwargs):
        try:
            return build(*args, **kwargs)
        except ConfigError:
            raise
        except (SieveStreamError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    inner.__name__ = build.__name__
    inner.__doc__ = build.__doc__
    return inner


@_wrap
def objective_from(config: dict) -> ObjectiveSpec:
    kernel = KernelSpec(kind=config.get("objective.kernel", "polynomial-features"),
                        beta=config.get("objective.beta", 1.0))
    return ObjectiveSpec(
        lambda_i=config.get("objective.lambda_i", 1.0),
        lambda_d=config.get("objective.lambda_d", 1.0),
        alpha=config.get("objective.alpha", 1.0),
        informativeness=config.get("objective.informativeness", "softmax-entropy"),
        kernel=kernel,
        detection_lambda=config.get("objective.detection_lambda", 0.5),
    )


@_wrap
def selector_from(config: dict) -> SelectorConfig:
    if "selector.algorithm" not in config or "selector.k" not in config:
        raise ConfigError("selector.algorithm and selector.k are required")
    return SelectorConfig(
        algorithm=config["selector.algorithm"],
        k=config["selector.k"],
        epsilon=config.get("selector.epsilon"),
        t=config.get("selector.t"),
        seed=config.get("selector.seed"),
    )


@_wrap
def simulator_from(config: dict) -> tuple[WorldSpec, PeculiaritySpec]:
    preset = config.get("simulator.preset", "full")
    if preset not in ("full", "none"):
        raise ConfigError(f"unknown simulator.preset {preset!r}")
    world, pec = (full_scale_preset()[:2] if preset == "full"
                  else (WorldSpec(), PeculiaritySpec()))
    wkw = {k.split(".", 1)[1]: v for k, v in config.items()
           if k.startswith("simulator.") and k.split(".", 1)[1] in WorldSpec.__dataclass_fields__}
    pkw = {k.split(".", 1)[1]: v for k, v in config.items()
           if k.startswith("simulator.") and k.split(".", 1)[1] in PeculiaritySpec.__dataclass_fields__}
    from dataclasses import replace
    return replace(world, **wkw), replace(pec, **pkw)


@_wrap
def algorithms_from(config: dict) -> list[SelectorConfig]:
    """Expand harness.algorithms x harness.ks x harness.epsilons into selector configs.

    Falls back to the single selector.* entry when harness.algorithms is absent.
    """
    if "harness.algorithms" not in config:
        return [selector_from(config)]
    ks = config.get("harness.ks") or ([config["selector.k"]] if "selector.k" in config else None)
    if not ks:
        raise ConfigError("harness.ks (or selector.k) is required")
    epsilons = config.get("harness.epsilons") or [config.get("selector.epsilon", 0.1)]
    t = config.get("harness.t", config.get("selector.t"))
    seed = config.get("selector.seed", 0)
    out = []
    for name in config["harness.algorithms"]:
        for k in ks:
            if name in SIEVE_ALGORITHMS:
                for eps in epsilons:
                    out.append(SelectorConfig(name, k, epsilon=eps,
                                              t=t if name == "three-sieves" else None))
            else:
                out.append(SelectorConfig(name, k, seed=seed if name == "random" else None))
    return out

"""Run configuration: a small ``[section]`` / ``key = value`` format.

Example::

    # comments start with '#' or ';'
    [problem]
    name = heat
    dim = 5

    [train]
    batch = 256
    steps = 20000

Unset keys take the defaults below; ``dim``, ``widths`` and ``eval.points``
default per problem. Command-line flags override file values.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .network import ACTIVATIONS, PRECISIONS
from .problems import PROBLEM_NAMES, default_dimension, default_widths

# paper's spatial sample counts for the error estimates
PAPER_EVAL_POINTS = {"heat": 10_240_000, "gbm": 81_920, "blackscholes-corr": 81_920, "lorenz": 20_480, "heston": 10_240}

DEFAULT_TIME_STEPS = {"heat": 1, "gbm": 1, "blackscholes-corr": 1, "lorenz": 100, "heston": 100}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


def _int_pair(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated integers")
    return tuple(int(p) for p in parts)


def _levels(text: str):
    text = text.strip()
    if "-" in text and "," not in text:
        lo, hi = (int(p) for p in text.split("-"))
        return tuple(range(lo, hi + 1))
    return tuple(int(p) for p in text.split(","))


def _optional_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _choice(options):
    def parse(text):
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


def _bool(text: str):
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected true or false")


# section -> key -> (parser, default)
SCHEMA = {
    "problem": {
        "name": (_choice(PROBLEM_NAMES), None),
        "dim": (_optional_int, None),
        "time_steps": (_optional_int, None),
        "horizon": (float, 1.0),
    },
    "network": {
        "widths": (lambda t: None if t.strip().lower() in ("", "none") else _int_pair(t), None),
        "activation": (_choice(ACTIVATIONS), "tanh"),
        "bn_epsilon": (float, 1e-6),
        "bn_momentum": (float, 0.99),
    },
    "train": {
        "batch": (int, 8192),
        "steps": (int, 750_000),
        "seed": (int, 0),
        "runs": (int, 1),
        "precision": (_choice(PRECISIONS), "float64"),
        "learning_rate": (_optional_float, None),
        "eval_every": (_optional_int, None),
        "checkpoint_every": (_optional_int, None),
        "clock": (_choice(("wall", "none")), "wall"),
    },
    "eval": {
        "points": (_optional_int, None),
        "reference_samples": (int, 1_048_576),
        "seed": (int, 12345),
        "domain": (_choice(("train", "unit")), "train"),
        "floor": (float, 1e-12),
        "cache": (_bool, True),
    },
    "convergence": {
        "levels": (_levels, tuple(range(2, 8))),
        "paths": (int, 100_000),
    },
    "output": {
        "dir": (str, "runs/out"),
    },
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, dotted: str):
        section, key = dotted.split(".")
        return self.values[section][key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    @property
    def problem(self) -> str:
        return self["problem.name"]

    def render(self, skip=()) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            if section in skip:
                continue
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_format(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        """Hash of every setting that affects results (the output location does not)."""
        return hashlib.sha256(self.render(skip=("output",)).encode()).hexdigest()


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if len(value) > 2 and list(value) == list(range(value[0], value[-1] + 1)):
            return f"{value[0]}-{value[-1]}"
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, source: str = "<config>", lines: dict | None = None) -> dict:
    """Parse config text into ``{section: {key: value}}`` holding only the keys present.

    If ``lines`` is given it receives ``{"section.key": line_number}``.
    """
    out: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno, source)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno, source)
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno, source)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno, source)
        parser = SCHEMA[section][key][0]
        try:
            out[section][key] = parser(value)
            if lines is not None:
                lines[f"{section}.{key}"] = lineno
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r} for {section}.{key}: {exc}", lineno, source) from None
    return out


def parse_config(text: str = "", overrides: dict | None = None, source: str = "<config>") -> RunConfig:
    """File text, then ``overrides`` (``{"section.key": raw_string_or_value}``), then defaults."""
    lines: dict = {}
    found = parse_text(text, source, lines)
    for dotted, value in (overrides or {}).items():
        try:
            section, key = dotted.split(".")
            parser = SCHEMA[section][key][0]
        except (ValueError, KeyError):
            raise ConfigError(f"unknown option {dotted!r}", None, "<flags>") from None
        if isinstance(value, str):
            try:
                value = parser(value)
            except ValueError as exc:
                raise ConfigError(f"bad value {value!r} for {dotted}: {exc}", None, "<flags>") from None
        found.setdefault(section, {})[key] = value
        lines.pop(dotted, None)

    values = {s: {k: found.get(s, {}).get(k, default) for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()}
    name = values["problem"]["name"]
    if name is None:
        raise ConfigError("no problem given (set [problem] name or pass --problem)", None, source)
    _validate(values, source, lines)
    prob, net = values["problem"], values["network"]
    if prob["dim"] is None:
        prob["dim"] = default_dimension(name)
    if prob["time_steps"] is None:
        prob["time_steps"] = DEFAULT_TIME_STEPS[name]
    if net["widths"] is None:
        net["widths"] = default_widths(name, prob["dim"])
    if values["eval"]["points"] is None:
        values["eval"]["points"] = PAPER_EVAL_POINTS[name]
    return RunConfig(values)


def _validate(values, source, lines):
    t = values["train"]
    checks = [
        (t["batch"] >= 2, "train.batch must be at least 2"),
        (t["steps"] >= 1, "train.steps must be at least 1"),
        (t["runs"] >= 1, "train.runs must be at least 1"),
        (t["learning_rate"] is None or t["learning_rate"] > 0, "train.learning_rate must be positive"),
        (t["eval_every"] is None or t["eval_every"] >= 1, "train.eval_every must be positive"),
        (t["checkpoint_every"] is None or t["checkpoint_every"] >= 1, "train.checkpoint_every must be positive"),
        (values["problem"]["dim"] is None or values["problem"]["dim"] >= 1, "problem.dim must be positive"),
        (values["problem"]["horizon"] > 0, "problem.horizon must be positive"),
        (values["eval"]["points"] is None or values["eval"]["points"] >= 1, "eval.points must be positive"),
        (values["eval"]["reference_samples"] >= 2, "eval.reference_samples must be at least 2"),
        (len(values["convergence"]["levels"]) >= 2, "convergence.levels needs at least two levels"),
        (values["convergence"]["paths"] >= 2, "convergence.paths must be at least 2"),
        (0 < values["network"]["bn_momentum"] < 1, "network.bn_momentum must lie in (0, 1)"),
    ]
    for ok, message in checks:
        if not ok:
            dotted = message.split()[0]
            line = lines.get(dotted)
            raise ConfigError(message, line, source if line is not None else "<flags/defaults>")

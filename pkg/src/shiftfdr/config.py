"""Experiment config files, the results CSV and the resolved-config sidecar.

A config file is YAML with three sections::

    experiment:
      scenario: means          # means | varsel | knockoff
      procedures: [bh, by, gsbh3]
      alphas: [0.05]
      replications: 200
      seed: 0
      n: null                  # required for varsel / knockoff
      k: null                  # explicit signal count, overrides the null fraction
      variance: known          # known | estimated
      nu: null                 # means scenario, estimated variance; default 2d
      random_signs: false
      resample_structure: false
      workers: 1
    structure:
      kind: equi               # identity | equi | ar1 | iar1 | block | sparse | prefixed
      d: 40
      rho: 0.3
    regime:
      kind: fixed_null         # fixed_null | fixed_signal
      null_frac: 0.75
      mu: 2.0
      grid: [1, 2, 3, 4, 5]

The JSON sidecar written next to every results file is itself a valid config.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .corr import STRUCTURE_KINDS, StructureSpec
from .harness import DEFAULT_MU_GRID, DEFAULT_NULL_GRID, SCENARIOS, ExperimentConfig, ExperimentSummary, Regime

__all__ = [
    "ConfigError",
    "RESULTS_HEADER",
    "load_config",
    "parse_config",
    "config_to_dict",
    "results_csv",
    "write_results",
]

RESULTS_HEADER = (
    "scenario", "procedure", "structure", "rho", "d", "n", "mu", "null_frac", "alpha",
    "fdr_hat", "fdr_se", "power_hat", "power_se", "mean_rejections", "replications", "seed",
)

_SECTIONS = ("experiment", "structure", "regime")
_EXPERIMENT_KEYS = {
    "scenario", "procedures", "alphas", "replications", "seed", "n", "k", "variance", "nu",
    "random_signs", "resample_structure", "workers",
}
_STRUCTURE_KEYS = {"kind", "d", "rho", "block_size", "density", "fraction", "seed"}
_REGIME_KEYS = {"kind", "null_frac", "mu", "grid"}


class ConfigError(ValueError):
    """Invalid configuration; ``str()`` carries a ``source:line:`` prefix when known."""

    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        self.source = source
        self.line = line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass
class _Located:
    """Plain python data plus the 1-based line of every mapping key and value."""

    data: dict
    lines: dict


def _plain(node, path, lines):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for key_node, value_node in node.value:
            key = key_node.value
            lines[path + (key,)] = key_node.start_mark.line + 1
            out[key] = _plain(value_node, path + (key,), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_plain(v, path + (i,), lines) for i, v in enumerate(node.value)]
    return yaml.SafeLoader(io.StringIO("")).construct_object(node, deep=True)


def _compose(text: str, source: str) -> _Located:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"cannot parse config: {getattr(exc, 'problem', exc)}", source,
                          mark.line + 1 if mark is not None else None) from exc
    lines: dict = {}
    if node is None:
        raise ConfigError("config is empty", source, 1)
    data = _plain(node, (), lines)
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping with sections " + ", ".join(_SECTIONS), source, 1)
    return _Located(data, lines)


class _Reader:
    def __init__(self, located: _Located, source: str):
        self.loc = located
        self.source = source

    def fail(self, message, path=()):
        line = None
        for cut in range(len(path), -1, -1):
            if path[:cut] in self.loc.lines:
                line = self.loc.lines[path[:cut]]
                break
        raise ConfigError(message, self.source, line)

    def section(self, name, allowed, required=True):
        value = self.loc.data.get(name)
        if value is None:
            if required:
                self.fail(f"missing required section '{name}'")
            return {}
        if not isinstance(value, dict):
            self.fail(f"section '{name}' must be a mapping", (name,))
        for key in value:
            if key not in allowed:
                self.fail(f"unknown field '{name}.{key}'", (name, key))
        return value

    def get(self, section, values, key, kind, default=None, required=False):
        path = (section, key)
        if key not in values or values[key] is None:
            if required:
                self.fail(f"missing required field '{section}.{key}'", (section,))
            return default
        raw = values[key]
        try:
            return kind(raw)
        except (TypeError, ValueError) as exc:
            self.fail(f"field '{section}.{key}': {exc}", path)


def _integer(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not float(v).is_integer():
        raise ValueError(f"expected an integer, got {v!r}")
    return int(v)


def _number(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    return float(v)


def _boolean(v):
    if not isinstance(v, bool):
        raise ValueError(f"expected true or false, got {v!r}")
    return v


def _text(v):
    if not isinstance(v, str):
        raise ValueError(f"expected a string, got {v!r}")
    return v.lower()


def _number_list(v):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        v = [v]
    if not isinstance(v, list) or not v:
        raise ValueError("expected a nonempty list of numbers")
    return tuple(_number(x) for x in v)


def _name_list(v):
    if isinstance(v, str):
        v = [s for s in v.split(",") if s.strip()]
    if not isinstance(v, list) or not v:
        raise ValueError("expected a nonempty list of procedure names")
    return tuple(_text(x).strip() for x in v)


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from config text.

    ``overrides`` maps ``"section.key"`` to values that replace (or supply)
    entries of the file, which is how command-line flags are merged in.
    """
    located = _compose(text, source) if text.strip() else _Located({}, {})
    for key in located.data:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section '{key}'", source, located.lines.get((key,)))
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".")
        if not isinstance(located.data.get(section), dict):
            located.data[section] = {}
        located.data[section][key] = value
    r = _Reader(located, source)

    exp = r.section("experiment", _EXPERIMENT_KEYS)
    scenario = r.get("experiment", exp, "scenario", _text, required=True)
    if scenario not in SCENARIOS:
        r.fail(f"field 'experiment.scenario' must be one of {SCENARIOS}", ("experiment", "scenario"))

    st = r.section("structure", _STRUCTURE_KEYS)
    kind = r.get("structure", st, "kind", _text, required=True)
    if kind not in STRUCTURE_KINDS:
        r.fail(f"field 'structure.kind' must be one of {STRUCTURE_KINDS}", ("structure", "kind"))
    try:
        structure = StructureSpec(
            kind=kind,
            d=r.get("structure", st, "d", _integer, required=True),
            rho=r.get("structure", st, "rho", _number),
            block_size=r.get("structure", st, "block_size", _integer, 4),
            density=r.get("structure", st, "density", _number, 0.2),
            fraction=r.get("structure", st, "fraction", _number, 0.25),
            seed=r.get("structure", st, "seed", _integer, 0),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        r.fail(str(exc), ("structure",))

    rg = r.section("regime", _REGIME_KEYS, required=False)
    regime_kind = r.get("regime", rg, "kind", _text, "fixed_null")
    try:
        if regime_kind == "fixed_null":
            regime = Regime.fixed_null(r.get("regime", rg, "null_frac", _number, 0.75),
                                       r.get("regime", rg, "grid", _number_list, DEFAULT_MU_GRID))
        elif regime_kind == "fixed_signal":
            regime = Regime.fixed_signal(r.get("regime", rg, "mu", _number, 2.0),
                                         r.get("regime", rg, "grid", _number_list, DEFAULT_NULL_GRID))
        else:
            r.fail("field 'regime.kind' must be fixed_null or fixed_signal", ("regime", "kind"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        r.fail(str(exc), ("regime",))

    try:
        return ExperimentConfig(
            scenario=scenario,
            structure=structure,
            regime=regime,
            procedures=r.get("experiment", exp, "procedures", _name_list, ("bh", "by", "gsbh3")),
            alphas=r.get("experiment", exp, "alphas", _number_list, (0.05,)),
            replications=r.get("experiment", exp, "replications", _integer, 200),
            master_seed=r.get("experiment", exp, "seed", _integer, 0),
            n=r.get("experiment", exp, "n", _integer),
            k=r.get("experiment", exp, "k", _integer),
            variance=r.get("experiment", exp, "variance", _text, "known"),
            nu=r.get("experiment", exp, "nu", _integer),
            random_signs=r.get("experiment", exp, "random_signs", _boolean, False),
            resample_structure=r.get("experiment", exp, "resample_structure", _boolean, False),
            workers=r.get("experiment", exp, "workers", _integer, 1),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        r.fail(str(exc), ("experiment",))


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
    return parse_config(text, str(path), overrides)


def config_to_dict(config: ExperimentConfig) -> dict:
    """Fully resolved config in the file layout, every default spelled out."""
    st = config.structure
    regime = config.regime
    return {
        "experiment": {
            "scenario": config.scenario,
            "procedures": list(config.procedures),
            "alphas": list(config.alphas),
            "replications": config.replications,
            "seed": config.master_seed,
            "n": config.n,
            "k": config.k,
            "variance": config.variance,
            "nu": config.nu,
            "random_signs": config.random_signs,
            "resample_structure": config.resample_structure,
            "workers": config.workers,
        },
        "structure": {
            "kind": st.kind,
            "d": st.d,
            "rho": st.rho,
            "block_size": st.block_size,
            "density": st.density,
            "fraction": st.fraction,
            "seed": st.seed,
        },
        "regime": {
            "kind": regime.kind,
            "null_frac": regime.null_frac,
            "mu": regime.mu,
            "grid": list(regime.grid),
        },
    }


def _fmt(value) -> str:
    # locale-independent, shortest round-trip decimal without exponent
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    return np.format_float_positional(value, unique=True, trim="-")


def results_csv(summary: ExperimentSummary) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULTS_HEADER)
    for cell in summary.cells:
        writer.writerow([_fmt(getattr(cell, col)) for col in RESULTS_HEADER])
    return buf.getvalue()


def write_results(summary: ExperimentSummary, out_path) -> tuple[Path, Path]:
    """Write the CSV and a ``.json`` sidecar holding the resolved config."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(results_csv(summary).encode("utf-8"))
    sidecar = out_path.with_suffix(".json")
    sidecar.write_text(json.dumps(config_to_dict(summary.config), indent=2) + "\n", encoding="utf-8")
    return out_path, sidecar

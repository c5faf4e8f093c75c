"""INI-style configuration: one section per module, keys mirror dataclass fields.

Example::

    [harness]
    repeats = 5
    perp_frames = 30

    [extraction]
    epsilon = 20
    iterations = 2

    [model]
    learning_rate = 1e-3
"""

from __future__ import annotations

import configparser
import os
from dataclasses import fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .harness import ExperimentSpec

OUTPUT_ENV = "QUSSTEAL_OUTPUT_DIR"
SECTIONS = ("harness", "rfsim", "calibration", "model", "blackbox", "extraction")


def output_dir() -> Path:
    """Directory for outputs given as relative paths (``$QUSSTEAL_OUTPUT_DIR`` or the cwd)."""
    return Path(os.environ.get(OUTPUT_ENV, "."))


def out_path(path) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    d = output_dir()
    d.mkdir(parents=True, exist_ok=True)
    return d / p


def load(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"{path}: unknown section(s) {sorted(unknown)}; expected {list(SECTIONS)}")
    return cp


def _coerce(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(text)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(_number_or_text(t) for t in items)
    if isinstance(like, str):
        return text
    raise ValueError(f"{type(like).__name__} fields are set through their own section")


def _number_or_text(t: str):
    for kind in (int, float):
        try:
            return kind(t)
        except ValueError:
            pass
    return t


def _override(obj, section: configparser.SectionProxy, skip=()):
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, text in section.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigurationError(f"[{section.name}] unknown key {key!r}")
        try:
            changes[key] = _coerce(text, getattr(obj, key))
        except ValueError as exc:
            raise ConfigurationError(f"[{section.name}] {key}: cannot parse {text!r}") from exc
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{section.name}] {exc}") from exc


def experiment_spec(name: str, cp: configparser.ConfigParser | None = None) -> ExperimentSpec:
    """Default spec for ``name`` with every section of ``cp`` applied on top."""
    spec = ExperimentSpec.default(name)
    if cp is None:
        return spec
    if cp.has_section("harness"):
        spec = _override(spec, cp["harness"])
    if cp.has_section("rfsim"):
        spec = _override(spec, cp["rfsim"])
    if cp.has_section("calibration"):
        sec = cp["calibration"]
        spec = _override(spec, sec, skip=("snr",))
        if "snr" in sec:
            spec = replace(spec, base=replace(spec.base, snr=float(sec["snr"])))
    if cp.has_section("extraction"):
        spec = replace(spec, base=_override(spec.base, cp["extraction"]))
    if cp.has_section("model"):
        spec = replace(spec, base=replace(spec.base, inner_train=_override(spec.base.inner_train, cp["model"])))
    if cp.has_section("blackbox"):
        spec = replace(spec, victim_train=_override(spec.victim_train, cp["blackbox"]))
    return spec


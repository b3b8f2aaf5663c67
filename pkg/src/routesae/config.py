"""Run files: INI sections mapped onto dataclasses, unknown keys rejected, and a
resolved echo written next to every output."""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .synthbench import SyntheticSpec
from .toy_lm import ToyLmConfig
from .trainer import TrainConfig

ECHO_NAME = "resolved_config.ini"


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class SynthSection:
    n_tokens: int = 50_000
    n_eval_tokens: int = 10_000


@dataclass
class ToyLmSection:
    n_seqs: int = 64
    seq_len: int = 64
    n_eval_seqs: int = 8
    layers: str = ""  # comma-separated absolute layer ids; empty means the middle half


@dataclass
class EvalSection:
    window: int = 32
    thresholds: str = "5,10,15"
    k_values: str = "8,16,32,64"
    norm_tokens: int = 100_000


@dataclass
class InterpSection:
    sample_size: int = 100
    retries: int = 3
    concurrency: int = 4
    responses_dir: str = ""


@dataclass
class SteerSection:
    feature_id: int = 0
    clamp_value: float = 20.0
    horizon: int = 16
    prompt: str = "the "


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    synth_data: SynthSection = field(default_factory=SynthSection)
    toylm: ToyLmConfig = field(default_factory=ToyLmConfig)
    toylm_data: ToyLmSection = field(default_factory=ToyLmSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    interp: InterpSection = field(default_factory=InterpSection)
    steer: SteerSection = field(default_factory=SteerSection)

    def with_seed(self, seed: int) -> "RunConfig":
        """Override every seed in the run."""
        return dataclasses.replace(
            self,
            run=dataclasses.replace(self.run, seed=seed),
            synth=dataclasses.replace(self.synth, seed=seed),
            toylm=dataclasses.replace(self.toylm, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )

    def int_list(self, text: str) -> list[int]:
        return [int(t) for t in text.replace(" ", "").split(",") if t]

    def float_list(self, text: str) -> list[float]:
        return [float(t) for t in text.replace(" ", "").split(",") if t]


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _coerce(raw: str, tp, where: str):
    text = raw.strip()
    args = typing.get_args(tp)
    if type(None) in args:
        if text.lower() in ("", "none"):
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if tp is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            if len(text) >= 2 and text[0] == text[-1] == '"':
                return text[1:-1]
            return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tp.__name__}") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _section_from_items(cls, items: dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(items) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    values = {k: _coerce(v, hints[k], f"[{section}] {k}") for k, v in items.items()}
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text: str = "", overrides: dict[str, dict[str, str]] | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = sorted(set(parser.sections()) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    merged = {s: dict(parser[s]) if parser.has_section(s) else {} for s in SECTIONS}
    for section, items in (overrides or {}).items():
        if section not in merged:
            raise ConfigError(f"unknown config section {section!r}")
        merged[section].update(items)
    types = typing.get_type_hints(RunConfig)
    return RunConfig(**{s: _section_from_items(types[s], merged[s], s) for s in SECTIONS})


def load_config(path: str | os.PathLike | None, overrides: dict[str, dict[str, str]] | None = None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def parse_override(item: str) -> tuple[str, str, str]:
    """``section.key=value``"""
    key, sep, value = item.partition("=")
    section, dot, name = key.partition(".")
    if not sep or not dot or not section or not name:
        raise ConfigError(f"override {item!r} is not section.key=value")
    return section, name, value


def _fmt(value) -> str:
    if value is None:
        return "none"
    text = str(value)
    if isinstance(value, str) and (text != text.strip() or text.startswith('"')):
        return f'"{text}"'
    return text


def dump_config(cfg: RunConfig, command: list[str] | None = None) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for s in SECTIONS:
        parser[s] = {k: _fmt(v) for k, v in dataclasses.asdict(getattr(cfg, s)).items()}
    buf = io.StringIO()
    if command is not None:
        buf.write("# command: " + " ".join(command) + "\n")
    parser.write(buf)
    return buf.getvalue()


def write_echo(cfg: RunConfig, out_dir: str | os.PathLike, command: list[str] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / ECHO_NAME
    path.write_text(dump_config(cfg, command))
    return path

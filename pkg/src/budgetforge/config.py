"""Run configuration: a flat key registry, INI files, flag overrides, snapshots.

Every key lives in exactly one INI section; section names only group keys
for readability. Values are parsed by the key's declared kind.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, IngestionError


@dataclass(frozen=True)
class Key:
    section: str
    kind: str  # int, float, str, floats, ints, strs
    default: object
    help: str


KEYS: dict[str, Key] = {
    # run
    "seed": Key("run", "int", None, "master seed (world generation, training)"),
    "budget": Key("run", "floats", None, "budget in dollars; a comma list for sweeps and training mixes"),
    "out": Key("run", "str", None, "output directory"),
    "seeds": Key("run", "ints", (1, 2, 3), "evaluation seeds"),
    "methods": Key("run", "strs", ("pu-adka", "random", "cost_greedy", "match_greedy"), "methods to evaluate"),
    "checkpoint": Key("run", "str", "", "directory holding trained models (default: --out)"),
    # world
    "data": Key("world", "str", "", "dataset directory written by gen (empty: synthetic world)"),
    "topics": Key("world", "int", 4, "synthetic topics"),
    "questions": Key("world", "int", 200, "synthetic training questions"),
    "experts": Key("world", "int", 20, "synthetic experts"),
    "dimension": Key("world", "int", 64, "synthetic embedding dimension"),
    "tau": Key("world", "float", 0.5, "capability similarity threshold"),
    "price_ladder": Key("world", "floats", (0.5, 0.4, 0.3, 0.2, 0.1), "unit prices within a cohort"),
    # oracle
    "oracle_mode": Key("oracle", "str", "coverage", "coverage or noisy_coverage"),
    "bandwidth": Key("oracle", "float", 0.0, "coverage bandwidth (0: half the median dev distance)"),
    "noise": Key("oracle", "float", 0.0, "gain noise std in noisy_coverage mode"),
    # matcher
    "epochs": Key("matcher", "int", 30, "matcher epochs"),
    "matcher_lr": Key("matcher", "float", 1e-2, "matcher learning rate"),
    "matcher_hidden": Key("matcher", "int", 32, "matcher hidden width"),
    "matcher_cohort": Key("matcher", "int", 5, "attention subset size during matcher training (0: whole pool)"),
    "restarts": Key("matcher", "int", 3, "matcher restarts"),
    # allocator
    "agents": Key("allocator", "int", 10, "agents per round (also the baseline batch size)"),
    "cohort_size": Key("allocator", "int", 5, "experts sampled per iteration"),
    "episodes": Key("allocator", "int", 80, "training episodes"),
    "gamma": Key("allocator", "float", 0.9, "discount"),
    "decay": Key("allocator", "float", 0.1, "sampling-weight decay per assignment"),
    "eps_start": Key("allocator", "float", 1.0, "initial exploration rate"),
    "eps_end": Key("allocator", "float", 0.05, "final exploration rate"),
    "eps_fraction": Key("allocator", "float", 0.5, "fraction of training spent decaying epsilon"),
    "lr": Key("allocator", "float", 1e-3, "Q-network learning rate"),
    "hidden": Key("allocator", "int", 64, "Q-network hidden width"),
    "batch_size": Key("allocator", "int", 64, "replay minibatch"),
    "sync_period": Key("allocator", "int", 200, "gradient steps between target syncs"),
    "updates_per_step": Key("allocator", "int", 1, "gradient steps per environment step"),
    "credit": Key("allocator", "str", "difference", "per-agent learning signal: difference, shared or sum"),
}

REQUIRED = {
    "gen": ("seed", "out"),
    "train": ("seed", "budget", "out"),
    "evaluate": ("seed", "budget", "out"),
    "sweep": ("seed", "budget", "out"),
}


def parse_value(name: str, raw) -> object:
    key = KEYS[name]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key.kind == "int":
            return int(text)
        if key.kind == "float":
            return float(text)
        if key.kind == "str":
            return text
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if key.kind == "floats":
            return tuple(float(p) for p in parts)
        if key.kind == "ints":
            return tuple(int(p) for p in parts)
        return tuple(parts)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {key.kind}") from exc


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        parser.read(p, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    values = {}
    for section in parser.sections():
        for name, raw in parser.items(section):
            if name not in KEYS:
                raise ConfigError(f"{p}: unknown key {name!r} in [{section}]")
            if name in values:
                raise ConfigError(f"{p}: key {name!r} set twice")
            values[name] = parse_value(name, raw)
    return values


class RunConfig:
    """Resolved key values with attribute access."""

    def __init__(self, values: dict):
        unknown = set(values) - set(KEYS)
        if unknown:
            raise ConfigError(f"unknown keys: {sorted(unknown)}")
        self.values = {k: values.get(k, key.default) for k, key in KEYS.items()}

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @classmethod
    def resolve(cls, command: str, file_values: dict, overrides: dict) -> "RunConfig":
        values = dict(file_values)
        values.update({k: parse_value(k, v) for k, v in overrides.items() if v is not None})
        cfg = cls(values)
        cfg.validate(command)
        return cfg

    def validate(self, command: str) -> None:
        for name in REQUIRED.get(command, ()):
            if self.values[name] is None:
                raise ConfigError(f"--{name} is required (flag or config file)")
        budgets = self.values["budget"]
        if budgets is not None:
            if not budgets:
                raise ConfigError("budget list is empty")
            if any(b < 0 for b in budgets):
                raise ConfigError("budgets must be non-negative")
            if len(set(budgets)) != len(budgets):
                raise ConfigError(f"duplicate budget values in {budgets}")
            if list(budgets) != sorted(budgets):
                raise ConfigError("budgets must be ascending")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not self.methods:
            raise ConfigError("methods must be nonempty")
        if self.data:
            d = Path(self.data)
            for f in ("questions.jsonl", "experts.jsonl", "embeddings.bfem"):
                if not (d / f).is_file():
                    raise IngestionError(f"missing input file: {d / f}")

    def snapshot(self) -> str:
        """INI text of every key, grouped by section, in registry order."""
        parser = configparser.ConfigParser(interpolation=None)
        for name, key in KEYS.items():
            if not parser.has_section(key.section):
                parser.add_section(key.section)
            value = self.values[name]
            if value is not None:
                parser.set(key.section, name, format_value(value))
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser.items(section)]
            lines.append("")
        return "\n".join(lines)

    def input_files(self) -> list[Path]:
        if not self.data:
            return []
        d = Path(self.data)
        names = ("questions.jsonl", "experts.jsonl", "embeddings.bfem", "capability.json")
        return [d / n for n in names if (d / n).is_file()]


def blob_sha(data: bytes) -> str:
    """Git's blob object hash."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_run_record(cfg: RunConfig, command: str, directory) -> dict:
    """Write ``config.ini`` and ``run.json`` (content hashes of every input)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    snap = cfg.snapshot()
    (d / "config.ini").write_text(snap, encoding="utf-8")
    inputs = {p.name: blob_sha(p.read_bytes()) for p in cfg.input_files()}
    combined = blob_sha((snap + "".join(f"{k} {v}\n" for k, v in sorted(inputs.items()))).encode())
    record = {"command": command, "config_sha": blob_sha(snap.encode()), "inputs": inputs,
              "content_hash": combined}
    (d / "run.json").write_text(json.dumps(record, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return record

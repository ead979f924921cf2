"""Key-value config files (INI sections per module), config fingerprints,
and the artifact manifest written alongside every output directory."""

from __future__ import annotations

import configparser
import hashlib
import json
import time
from dataclasses import asdict, fields, is_dataclass, replace
from pathlib import Path

from .backbone import DiTConfig
from .conditioning import TinyLMConfig
from .corpus import CorpusConfig
from .trainflow import PretrainConfig, TrainConfig


def fingerprint(obj) -> str:
    """Short stable hash of a dataclass (or plain dict) configuration."""
    payload = asdict(obj) if is_dataclass(obj) else obj
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _coerce(raw: str, target_type):
    if target_type is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def _apply_section(cfg, section: configparser.SectionProxy):
    """Return a dataclass copy with overrides from one config section."""
    by_name = {f.name: f for f in fields(cfg)}
    updates = {}
    for key, raw in section.items():
        if key not in by_name:
            raise KeyError(f"unknown option {key!r} for [{section.name}]")
        f = by_name[key]
        base = f.type if isinstance(f.type, type) else type(getattr(cfg, key))
        updates[key] = _coerce(raw, base)
    return replace(cfg, **updates)


def load_config(path: str | Path | None):
    """Parse an INI config into the per-module dataclasses.

    Sections: [corpus], [model], [encoder], [pretrain], [train], plus the
    free-form [experiment] section (split_layer, sweep gammas, sizes...).
    """
    from .experiment import DeskConfig  # late import; experiment depends on us

    desk = DeskConfig()
    if path is None:
        return desk
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    if parser.has_section("corpus"):
        sec = dict(parser.items("corpus"))
        if "sizes" in sec:
            a, b, c = (int(x) for x in sec.pop("sizes").split(","))
            desk.corpus = replace(desk.corpus, sizes={"alpha": a, "beta": b, "gamma": c})
        if "seed" in sec:
            desk.corpus = replace(desk.corpus, seed=int(sec.pop("seed")))
        if sec:
            raise KeyError(f"unknown [corpus] options: {sorted(sec)}")
    if parser.has_section("model"):
        desk.model = _apply_section(desk.model, parser["model"])
    if parser.has_section("encoder"):
        desk.encoder_lm = _apply_section(desk.encoder_lm, parser["encoder"])
    if parser.has_section("pretrain"):
        desk.pretrain = _apply_section(desk.pretrain, parser["pretrain"])
    if parser.has_section("train"):
        desk.train = _apply_section(desk.train, parser["train"])
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key == "sweep_gammas":
                desk.sweep_gammas = tuple(float(x) for x in raw.split(","))
            elif key == "split_layer":
                desk.split_layer = int(raw)
            elif key == "sampler_steps":
                desk.sampler_steps = int(raw)
            elif key == "eval_size":
                desk.eval_size = int(raw)
            elif key == "seed":
                desk.seed = int(raw)
            else:
                raise KeyError(f"unknown [experiment] option {key!r}")
    return desk


class Manifest:
    """Append-only record of artifacts and the configs that produced them."""

    def __init__(self, out_dir: str | Path):
        self.path = Path(out_dir) / "manifest.json"
        self.entries: dict[str, dict] = {}
        if self.path.exists():
            self.entries = json.loads(self.path.read_text())

    def record(self, name: str, path: str | Path, kind: str, config_fingerprint: str,
               **extra) -> None:
        self.entries[name] = {
            "path": str(path),
            "kind": kind,
            "fingerprint": config_fingerprint,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
            **extra,
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.entries, indent=1, sort_keys=True))

    def get(self, name: str) -> dict | None:
        return self.entries.get(name)

    def has_current(self, name: str, config_fingerprint: str) -> bool:
        e = self.entries.get(name)
        return bool(e and e["fingerprint"] == config_fingerprint and Path(e["path"]).exists())

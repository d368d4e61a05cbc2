"""Flat key=value run configuration with sections, overrides, and hashing.

One file drives every command; `--set section.key=value` overrides single
entries. Each run writes back its fully resolved snapshot, whose hash names
the run directory, so any emitted snapshot replays the run exactly.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .corpus import SyntheticCorpusSpec
from .errors import ConfigError
from .objectives import PretrainConfig
from .retrieval import FinetuneConfig

DEFAULTS: dict[str, dict] = {
    "corpus": {
        "vocab_size": 64,
        "n_languages": 2,
        "docs_per_language": 100,
        "caption_count": 100,
        "regions_min": 2,
        "regions_max": 5,
        "feature_dim": 16,
        "n_classes": 8,
        "class_feature_noise": 0.1,
        "seed": 0,
    },
    "model": {
        "n_layers": 2,
        "n_heads": 4,
        "hidden_dim": 64,
        "feedforward_dim": 256,
        "max_text_len": 128,
        "max_regions": 16,
        "dropout": 0.1,
        "dtype": "float32",
        "seed": 0,
    },
    "pretrain": {
        "total_steps": 500,
        "batch_size": 32,
        "learning_rate": 1e-4,
        "warmup_steps": 0,
        "adam_beta1": 0.9,
        "adam_beta2": 0.98,
        "smoothing_exponent": 0.3,
        "mix_ratio": 0.5,
        "replace_prob": 0.5,
        "negatives_per_positive": 1,
        "mlm_rate": 0.15,
        "mrm_rate": 0.15,
        "mrm_zero_prob": 0.9,
        "tasks": ("xmlm", "mc_mlm", "mc_mrm", "mc_vlm"),
        "mct_enabled": True,
        "mct_languages": (),
        "language_policy": "keep-english",
        "schedule": "alternate",
        "seed": 0,
    },
    "finetune": {
        "total_steps": 300,
        "batch_size": 16,
        "learning_rate": 5e-5,
        "warmup_steps": 0,
        "adam_beta1": 0.9,
        "adam_beta2": 0.98,
        "negatives_per_positive": 3,
        "mode": "normal",
        "replace_prob": 0.5,
        "mct_languages": (),
        "seed": 0,
    },
    "eval": {
        "setting": "zero_shot",
        "batch_size": 128,
    },
    # [data] holds file paths (text_corpus, mm_corpus, lexicon, checkpoint,
    # train_<lang>, test_<lang>); [variant.*] sections hold ablation overrides.
    "data": {},
}

_FREE_SECTIONS = ("data",)
_VARIANT_PREFIX = "variant."


def _parse_value(raw: str, template) -> object:
    raw = raw.strip()
    if isinstance(template, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    return raw


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


@dataclass
class RunConfig:
    sections: dict[str, dict]

    def section(self, name: str) -> dict:
        return self.sections.get(name, {})

    def get(self, section: str, key: str):
        try:
            return self.sections[section][key]
        except KeyError:
            raise ConfigError(f"missing config entry {section}.{key}") from None

    def variants(self) -> dict[str, dict]:
        """Ablation variants: name -> pretrain-section overrides."""
        return {
            name[len(_VARIANT_PREFIX):]: values
            for name, values in self.sections.items()
            if name.startswith(_VARIANT_PREFIX)
        }

    def resolved_hash(self) -> str:
        canonical = json.dumps(self.sections, sort_keys=True, default=list)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def to_ini_text(self) -> str:
        lines = []
        for section in sorted(self.sections):
            values = self.sections[section]
            if not values and section in _FREE_SECTIONS:
                continue
            lines.append(f"[{section}]")
            for key in sorted(values):
                lines.append(f"{key} = {_render_value(values[key])}")
            lines.append("")
        return "\n".join(lines)

    def save_snapshot(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini_text(), encoding="utf-8")

    # -- typed views ---------------------------------------------------------

    def corpus_spec(self) -> SyntheticCorpusSpec:
        return SyntheticCorpusSpec(**self.section("corpus"))

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(**self.section("pretrain"))

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(**self.section("finetune"))

    def model_kwargs(self) -> dict:
        return dict(self.section("model"))


def _apply(sections: dict, section: str, key: str, raw: str) -> None:
    if section.startswith(_VARIANT_PREFIX):
        template = DEFAULTS["pretrain"].get(key)
        if template is None:
            raise ConfigError(f"unknown ablation override {section}.{key}")
        sections.setdefault(section, {})[key] = _parse_value(raw, template)
        return
    if section in _FREE_SECTIONS:
        sections.setdefault(section, {})[key] = raw.strip()
        return
    if section not in DEFAULTS:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    sections[section][key] = _parse_value(raw, DEFAULTS[section][key])


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the config file, then --set overrides, in that order."""
    sections = copy.deepcopy(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case
        read = parser.read(path, encoding="utf-8")
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(sections, section, key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        if "." not in target:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        section, key = target.split(".", 1)
        _apply(sections, section.strip(), key.strip(), raw)
    return RunConfig(sections=sections)

"""JSON run configuration: schema, validation and conversion to TravagConfig.

A config is one JSON object with the sections ``io``, ``autoencoder``,
``gan``, ``privacy``, ``generation`` and ``gridsearch`` plus a top-level
``seed``. Every section is optional; omitted fields take the defaults below.
The schema is shipped as ``docs/config.schema.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema

from travag.dp_optimizer import DpSgdConfig
from travag.errors import ConfigError
from travag.pipeline import TravagConfig

# Non-private defaults that learn a two-variant 90/10 log reliably on a CPU.
AUTOENCODER_DEFAULTS = {
    "clip_norm": 1.0,
    "noise_multiplier": 1.0,
    "sampling_rate": 1.0,
    "learning_rate": 1.0,
    "iterations": 2000,
    "microbatch_size": 1,
    "encoder_learning_rate": 1e-3,
    "latent_dim": None,
    "encoder_hidden": [128],
    "decoder_hidden": [128],
}

GAN_DEFAULTS = {
    "clip_norm": 1.0,
    "noise_multiplier": 1.0,
    "sampling_rate": 1.0,
    "learning_rate": 0.2,
    "iterations": 4000,
    "microbatch_size": 1,
    "generator_learning_rate": 1e-3,
    "noise_dim": 16,
    "generator_hidden": [64, 64],
    "discriminator_hidden": [128, 64],
}

_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_RATE = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
_COUNT = {"type": "integer", "minimum": 1}
_LAYERS = {"type": "array", "items": _COUNT}
_PATH = {"type": ["string", "null"]}

_DP_FIELDS = {
    "clip_norm": _POSITIVE,
    "noise_multiplier": {"type": "number", "minimum": 0},
    "sampling_rate": _RATE,
    "learning_rate": {"type": "number", "minimum": 0},
    "iterations": _COUNT,
    "microbatch_size": _COUNT,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "travag run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": ["integer", "null"], "minimum": 0},
        "io": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "input": _PATH,
                "format": {"enum": ["csv", "tsv", None]},
                "case_column": {"type": "string"},
                "activity_column": {"type": "string"},
                "timestamp_column": {"type": "string"},
                "output": _PATH,
                "bundle": _PATH,
                "ledger": _PATH,
            },
        },
        "autoencoder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                **_DP_FIELDS,
                "encoder_learning_rate": {"type": "number", "minimum": 0},
                "latent_dim": {"type": ["integer", "null"], "minimum": 1},
                "encoder_hidden": _LAYERS,
                "decoder_hidden": _LAYERS,
            },
        },
        "gan": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                **_DP_FIELDS,
                "generator_learning_rate": {"type": "number", "minimum": 0},
                "noise_dim": _COUNT,
                "generator_hidden": _LAYERS,
                "discriminator_hidden": _LAYERS,
            },
        },
        "privacy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epsilon": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "delta": {"type": ["number", "null"], "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "budget_split": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "calibrate": {"type": "boolean"},
            },
        },
        "generation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"count": {"type": ["integer", "null"], "minimum": 1}},
        },
        "gridsearch": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sampling_rates": {"type": "array", "minItems": 1, "items": _RATE},
                "iterations": {"type": "array", "minItems": 1, "items": _COUNT},
                "noise_multipliers": {"type": "array", "minItems": 1, "items": _POSITIVE},
                "trials": _COUNT,
                "jobs": _COUNT,
            },
        },
    },
}


@dataclass
class IoSettings:
    input: Optional[str] = None
    format: Optional[str] = None
    case_column: str = "case:concept:name"
    activity_column: str = "concept:name"
    timestamp_column: str = "time:timestamp"
    output: Optional[str] = None
    bundle: Optional[str] = None
    ledger: Optional[str] = None


@dataclass
class GridSettings:
    sampling_rates: list = field(default_factory=lambda: [0.1, 0.5, 1.0])
    iterations: list = field(default_factory=lambda: [500, 2000])
    noise_multipliers: list = field(default_factory=lambda: [1.0, 5.0, 20.0])
    trials: int = 3
    jobs: int = 1


@dataclass
class RunSettings:
    """A validated config document split into its parts."""

    travag: TravagConfig
    io: IoSettings
    grid: GridSettings
    seed: Optional[int]


def validate(doc) -> None:
    """Raise :class:`ConfigError` listing every schema violation by field."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    problems = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path))):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{where}: {err.message}")
    if problems:
        raise ConfigError(problems)


def _dp(section: dict) -> DpSgdConfig:
    return DpSgdConfig.from_dict(section)


def from_document(doc: dict) -> RunSettings:
    validate(doc)
    ae = {**AUTOENCODER_DEFAULTS, **doc.get("autoencoder", {})}
    gan = {**GAN_DEFAULTS, **doc.get("gan", {})}
    privacy = doc.get("privacy", {})
    seed = doc.get("seed")
    try:
        cfg = TravagConfig(
            autoencoder=_dp(ae),
            discriminator=_dp(gan),
            latent_dim=ae["latent_dim"],
            noise_dim=gan["noise_dim"],
            encoder_learning_rate=ae["encoder_learning_rate"],
            generator_learning_rate=gan["generator_learning_rate"],
            encoder_hidden=tuple(ae["encoder_hidden"]),
            decoder_hidden=tuple(ae["decoder_hidden"]),
            generator_hidden=tuple(gan["generator_hidden"]),
            discriminator_hidden=tuple(gan["discriminator_hidden"]),
            target_epsilon=privacy.get("epsilon"),
            target_delta=privacy.get("delta"),
            budget_split=privacy.get("budget_split", 0.5),
            calibrate=privacy.get("calibrate", False),
            generation_count=doc.get("generation", {}).get("count"),
            seed=seed if seed is not None else 0,
        )
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    return RunSettings(cfg, IoSettings(**doc.get("io", {})), GridSettings(**doc.get("gridsearch", {})), seed)


def load_config(path) -> RunSettings:
    """Read and validate a config file. Missing files raise FileNotFoundError."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}:{exc.lineno}: invalid JSON: {exc.msg}"]) from exc
    return from_document(doc)


def schema_json() -> str:
    return json.dumps(SCHEMA, indent=2) + "\n"

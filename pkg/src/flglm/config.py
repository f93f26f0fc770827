"""Experiment configuration (JSON), validated before any run."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

import jsonschema

from .model import ModelConfig

STRATEGIES = ("serial", "client_batch", "hierarchical")

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "strategy": {"enum": list(STRATEGIES)},
        "n_clients": {"type": "integer", "minimum": 1},
        "steps": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_blocks": {"type": "integer", "minimum": 3},
                "hidden_size": {"type": "integer", "minimum": 1},
                "n_heads": {"type": "integer", "minimum": 1},
                "vocab_size": {"type": "integer", "minimum": 8},
                "max_seq_len": {"type": "integer", "minimum": 1},
                "prefix_len": {"type": "integer", "minimum": 0},
                "prefix_encoder": {"enum": ["identity", "mlp"]},
                "prefix_hidden": {"type": "integer", "minimum": 1},
                "ffn_mult": {"type": "integer", "minimum": 1},
                "embed_std": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "train_mode": {"enum": ["full", "ptuning"]},
        "averaging": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "period_steps": {"type": "integer", "minimum": 1},
                "average_server_replicas": {"type": "boolean"},
            },
        },
        "client_batch_reduce": {"enum": ["sum", "mean"]},
        "crypto": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seal": {"type": "boolean"},
                "rsa_bits": {"type": "integer", "minimum": 512},
                "rotation_period": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "partition": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["iid", "label_skew"]},
                "fractions": {"type": ["object", "null"]},
            },
        },
        "task": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ["copy", "cloze"]},
                "n_train": {"type": "integer", "minimum": 1},
                "n_eval": {"type": "integer", "minimum": 1},
            },
        },
        "transport": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["loopback", "socketpair", "tcp"]},
                "host": {"type": "string"},
                "port": {"type": "integer", "minimum": 0, "maximum": 65535},
                "wire_dtype": {"enum": ["float32", "float64"]},
                "straggler_timeout": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "executor": {"enum": ["thread", "process"]},
        "seed": {"type": "integer", "minimum": 0},
    },
}


class ConfigValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    strategy: str = "serial"
    n_clients: int = 2
    steps: int = 300
    model: dict = field(default_factory=lambda: ModelConfig().to_dict())
    optimizer: dict = field(default_factory=lambda: {"lr": 2e-2, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8})
    train_mode: str = "full"
    averaging: dict = field(default_factory=lambda: {"period_steps": 50, "average_server_replicas": True})
    client_batch_reduce: str = "sum"
    crypto: dict = field(default_factory=lambda: {"seal": True, "rsa_bits": 2048, "rotation_period": 100})
    partition: dict = field(default_factory=lambda: {"mode": "iid", "fractions": None})
    task: dict = field(default_factory=lambda: {"name": "copy", "n_train": 2000, "n_eval": 32})
    transport: dict = field(default_factory=lambda: {
        "mode": "loopback", "host": "127.0.0.1", "port": 7788, "wire_dtype": "float32", "straggler_timeout": None})
    executor: str = "thread"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigValidationError(exc.message) from exc
        base = cls().to_dict()
        merged = _merge(base, raw)
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, **kw) -> "RunConfig":
        return RunConfig.from_dict(_merge(self.to_dict(), kw))

    def validate(self) -> None:
        try:
            jsonschema.validate(self.to_dict(), SCHEMA)
            self.model_config
        except (jsonschema.ValidationError, ValueError) as exc:
            raise ConfigValidationError(str(getattr(exc, "message", exc))) from exc
        if self.train_mode == "ptuning" and self.model.get("prefix_len", 0) == 0:
            raise ConfigValidationError("ptuning needs model.prefix_len > 0")
        if self.partition.get("mode") == "label_skew" and not self.partition.get("fractions"):
            raise ConfigValidationError("label_skew partition needs fractions")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> nested dict; value parsed as JSON when possible."""
    key, _, raw = text.partition("=")
    if not key or not _:
        raise ConfigValidationError(f"override {text!r} is not key=value")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    out: dict = {}
    cur = out
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = val
    return out

"""Adapter configuration, layered file < environment < explicit overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import yaml

ENV_PREFIX = "TIKZSMITH_ADAPTER_"

# Special identifier selecting in-process randomly initialized tiny models;
# used for protocol tests and smoke runs where no trained weights exist.
TINY_RANDOM = "tiny-random"


@dataclass
class AdapterConfig:
    model: str = TINY_RANDOM
    vision_encoder: str = TINY_RANDOM
    device: str = "cpu"
    max_context_tokens: int = 2048
    max_new_tokens_per_request: int = 512
    patch_layer_default: Optional[int] = None
    connector_seed: int = 0
    image_store_capacity: int = 64
    host: str = "127.0.0.1"
    port: int = 8040

    def validate(self) -> None:
        if not self.model or not self.vision_encoder:
            raise ValueError("model and vision_encoder identifiers are required")
        if self.max_context_tokens < 16:
            raise ValueError("max_context_tokens too small")
        if self.max_new_tokens_per_request < 1:
            raise ValueError("max_new_tokens_per_request must be positive")
        if self.image_store_capacity < 1:
            raise ValueError("image_store_capacity must be positive")


_FIELD_TYPES = {
    "model": str,
    "vision_encoder": str,
    "device": str,
    "max_context_tokens": int,
    "max_new_tokens_per_request": int,
    "patch_layer_default": int,
    "connector_seed": int,
    "image_store_capacity": int,
    "host": str,
    "port": int,
}


def load_config(path: Optional[str] = None, **overrides) -> AdapterConfig:
    values: dict = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError("config file must hold a key-value mapping")
        values.update(data)
    for key, cast in _FIELD_TYPES.items():
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            values[key] = cast(env)
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    known = {k: v for k, v in values.items() if k in _FIELD_TYPES}
    config = AdapterConfig(**known)
    config.validate()
    return config

"""Service configuration: a YAML file listing profile -> weights mappings."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .slots import SlotSpec

DEFAULT_SLOTS = [
    SlotSpec(profile="CLIP", kind="clip", dim=512, weights="openai/clip-vit-base-patch32"),
    SlotSpec(
        profile="sentence",
        kind="sentence",
        dim=384,
        weights="sentence-transformers/all-MiniLM-L6-v2",
    ),
]


@dataclass
class ServiceConfig:
    slots: list[SlotSpec] = field(default_factory=lambda: list(DEFAULT_SLOTS))
    host: str = "127.0.0.1"
    port: int = 9100

    @classmethod
    def load(cls, path: str | Path) -> "ServiceConfig":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        slots = [SlotSpec(**entry) for entry in data.get("slots", [])]
        return cls(
            slots=slots or list(DEFAULT_SLOTS),
            host=data.get("host", "127.0.0.1"),
            port=int(data.get("port", 9100)),
        )

    @classmethod
    def hashed(cls, dim: int = 512, sentence_dim: int = 384) -> "ServiceConfig":
        """Offline configuration backed by deterministic hashed slots."""
        return cls(
            slots=[
                SlotSpec(profile="hashed", kind="hashed", dim=dim),
                SlotSpec(
                    profile="sentence", kind="hashed", dim=sentence_dim, role="sentence"
                ),
            ]
        )

"""Pipeline configuration: defaults, YAML round-trip, environment overrides."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import DataError

ENV_EMBED_URL = "IMAGERAG_EMBED_URL"
ENV_MLLM_URL = "IMAGERAG_MLLM_URL"
ENV_LLM_URL = "IMAGERAG_LLM_URL"


@dataclass
class EncoderSettings:
    profile: str = "fixture"
    dim: int = 32
    endpoint: str = ""          # http(s) URL or fixture manifest path
    sentence_endpoint: str = ""  # http(s) URL or fixture manifest path
    templates_file: str = ""     # empty -> packaged template collection
    parallelism: int = 1


@dataclass
class LlmSettings:
    url: str = ""
    model: str = "keyphrase-llm"
    temperature: float = 1.0
    top_p: float = 0.99
    max_tokens: int = 512
    max_retries: int = 10
    stub_replies: str = ""  # canned-reply file; used when url is empty


@dataclass
class MllmSettings:
    url: str = ""
    model: str = "answering-mllm"
    retries: int = 2
    stub_replies: str = ""  # path to a canned-reply file; used when url is empty


@dataclass
class PipelineConfig:
    epsilon: float = 0.5
    delta1: float = 0.3
    delta2: float = 0.5
    gamma: float = 100.0
    division_method: str = "cascade_grid"
    cascade_n: int = 10
    vit_tile: int = 448
    cover_scale: int = 20
    proxy_method: str = "clustering"
    dbscan_eps: float = 0.3
    dbscan_min_samples: int = 5
    max_fast_cues: int = 5
    max_slow_cues: int = 3
    slow_epsilon_filter: bool = False
    force_output: bool = False
    prompt_mode: str = "plain"
    roi_multiplier: float = 1.0
    zoom_out_ratio: float = 1.3
    dedup_radius: int = 0            # Hamming radius for hash dedup; 0 = exact
    max_embeddings_per_key: int = 0  # 0 = unlimited
    seed: int = 2024
    workers: int = 4
    cache_dir: str = "caches"
    stores_dir: str = "stores"
    filter_words_file: str = ""
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    llm: LlmSettings = field(default_factory=LlmSettings)
    mllm: MllmSettings = field(default_factory=MllmSettings)

    def __post_init__(self):
        for name in ("epsilon", "delta1", "delta2"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise DataError(f"{name}={value} outside [0, 1]")
        if self.gamma <= 0:
            raise DataError("gamma must be positive")
        if self.cascade_n < 1:
            raise DataError("cascade_n must be >= 1")

    def apply_env(self) -> "PipelineConfig":
        """Environment variables win over file values when set."""
        embed = os.environ.get(ENV_EMBED_URL)
        if embed:
            self.encoder.endpoint = embed
        mllm = os.environ.get(ENV_MLLM_URL)
        if mllm:
            self.mllm.url = mllm
        llm = os.environ.get(ENV_LLM_URL)
        if llm:
            self.llm.url = llm
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        kwargs = {}
        nested = {"encoder": EncoderSettings, "llm": LlmSettings, "mllm": MllmSettings}
        for f in fields(cls):
            if f.name not in data:
                continue
            value = data.pop(f.name)
            if f.name in nested:
                try:
                    value = nested[f.name](**value)
                except TypeError as exc:
                    raise DataError(f"bad {f.name} config section: {exc}")
            kwargs[f.name] = value
        if data:
            raise DataError(f"unknown config keys: {sorted(data)}")
        return cls(**kwargs)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data)

"""Run configuration: one validated file drives synthesis, training,
evaluation and serving. Environment variables override the file, the file
overrides defaults. Unknown keys are rejected."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from .datafiles import fixture_data_dir, load_run_config_file
from .generator import GeneratorTrainConfig
from .rag import RagConfig, RagTrainConfig
from .retriever import RetrieverTrainConfig
from .synth import SynthConfig

ENV_DATA_DIR = "FLONET_DATA_DIR"
ENV_SEED = "FLONET_SEED"
ENV_PORT = "FLONET_PORT"


class ConfigError(ValueError):
    pass


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    session_log: str = "sessions.log"
    topk_panel: int = 5

    @classmethod
    def from_dict(cls, data: dict) -> "ServiceConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown service config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class RunConfig:
    data_dir: Path = field(default_factory=fixture_data_dir)
    out_dir: Path = Path("runs/default")
    seed: int = 13
    split_mode: Literal["seen", "unseen"] = "seen"
    rag: RagConfig = field(default_factory=RagConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    retriever: RetrieverTrainConfig = field(default_factory=RetrieverTrainConfig)
    generator: GeneratorTrainConfig = field(default_factory=GeneratorTrainConfig)
    train: RagTrainConfig = field(default_factory=RagTrainConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)

    # artifact paths, all under out_dir
    @property
    def corpus_path(self) -> Path:
        return self.out_dir / "corpus.jsonl"

    @property
    def splits_path(self) -> Path:
        return self.out_dir / "splits.json"

    @property
    def retriever_path(self) -> Path:
        return self.out_dir / "retriever.pt"

    @property
    def generator_path(self) -> Path:
        return self.out_dir / "generator.pt"

    @property
    def reports_dir(self) -> Path:
        return self.out_dir / "reports"

    @property
    def session_log_path(self) -> Path:
        return self.out_dir / self.service.session_log

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict = {}
        try:
            if "data_dir" in data:
                kwargs["data_dir"] = Path(data["data_dir"])
            if "out_dir" in data:
                kwargs["out_dir"] = Path(data["out_dir"])
            if "seed" in data:
                kwargs["seed"] = int(data["seed"])
            if "split_mode" in data:
                if data["split_mode"] not in ("seen", "unseen"):
                    raise ConfigError(f"invalid split_mode {data['split_mode']!r}")
                kwargs["split_mode"] = data["split_mode"]
            if "rag" in data:
                kwargs["rag"] = RagConfig.from_dict(data["rag"])
            if "synth" in data:
                kwargs["synth"] = SynthConfig.from_dict(data["synth"])
            if "retriever" in data:
                kwargs["retriever"] = RetrieverTrainConfig.from_dict(data["retriever"])
            if "generator" in data:
                kwargs["generator"] = GeneratorTrainConfig.from_dict(data["generator"])
            if "train" in data:
                kwargs["train"] = RagTrainConfig.from_dict(data["train"])
            if "service" in data:
                kwargs["service"] = ServiceConfig.from_dict(data["service"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**kwargs)

    def apply_environment(self, env: dict | None = None) -> "RunConfig":
        """Environment beats the file: data dir, seed and port overrides."""
        env = os.environ if env is None else env
        if ENV_DATA_DIR in env:
            self.data_dir = Path(env[ENV_DATA_DIR])
        if ENV_SEED in env:
            try:
                self.seed = int(env[ENV_SEED])
            except ValueError as exc:
                raise ConfigError(f"{ENV_SEED} must be an integer") from exc
        if ENV_PORT in env:
            try:
                self.service.port = int(env[ENV_PORT])
            except ValueError as exc:
                raise ConfigError(f"{ENV_PORT} must be an integer") from exc
        return self


def load_run_config(path: str | Path | None, env: dict | None = None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            data = load_run_config_file(path)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except ValueError as exc:
            raise ConfigError(f"invalid config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must contain an object")
        cfg = RunConfig.from_dict(data)
    return cfg.apply_environment(env)

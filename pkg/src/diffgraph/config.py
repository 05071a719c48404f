"""Experiment configuration: one JSON file fully determines a run.

Defaults mirror common large-scale training conventions (batch 256, cosine
learning-rate schedule starting at 1e-4 with warmup); desk-scale runs override
them in the config file.  ``parse(serialize(config)) == config`` holds exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field


@dataclass(frozen=True)
class TrainParams:
    ae_epochs: int = 1000
    ae_batch: int = 256
    ae_lr: float = 1e-4
    ae_warmup: int = 50
    diff_steps: int = 2000
    diff_batch: int = 256
    diff_lr: float = 1e-4
    diff_warmup: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "toy-molecule", "size": 50,
                                                   "seed": 0, "params": {}})
    encoder: dict = field(default_factory=dict)
    denoiser: dict = field(default_factory=dict)
    diffusion: dict = field(default_factory=dict)
    train: TrainParams = field(default_factory=TrainParams)
    checkpoints: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)
    theory: dict = field(default_factory=dict)
    seed: int = 0
    sample_count: int = 100
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "train" in d and isinstance(d["train"], dict):
            d["train"] = TrainParams(**d["train"])
        return ExperimentConfig(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @staticmethod
    def load(path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            return ExperimentConfig.from_json(f.read())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

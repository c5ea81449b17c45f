"""Run configuration schemas; every section rejects unknown keys."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field

from .detector import ModelConfig
from .losses import LossWeights
from .training import EmbedderSettings, TrainSettings


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GenerateSpec(Section):
    """Inline toy corpus, used when no dataset directory is given."""

    n: int = Field(ge=1)
    seed: int = 0
    zipf_exponent: float | None = None  # None = uniform over categories
    zipf_seed: int = 0


class MergeConfig(Section):
    manifests: list[str] = Field(min_length=1)
    out: str


class SynthRunConfig(Section):
    out: str
    n: int = Field(ge=0)
    seed: int = 0
    base_data: str | None = None  # dataset directory whose rarity statistics steer sampling
    base_generate: GenerateSpec | None = None
    stats: str | None = None  # alternatively, a rarity_stats.json
    observed_only: bool = False
    threshold: float = Field(0.5, ge=0, le=1)
    scorer: Literal["toy_dual", "none"] = "toy_dual"
    scorer_checkpoint: str | None = None
    scorer_pretrain_steps: int = Field(400, ge=0)
    canvas: int = Field(64, ge=32)
    second_pair_prob: float = Field(0.35, ge=0, le=1)
    multi_verb_prob: float = Field(0.15, ge=0, le=1)


class DataSpec(Section):
    path: str | None = None
    generate: GenerateSpec | None = None
    extra_paths: list[str] = Field(default_factory=list)  # e.g. synthetic sets appended for training


class TrainRunConfig(Section):
    out: str
    train_data: DataSpec
    eval_data: DataSpec | None = None
    model: ModelConfig = ModelConfig()
    train: TrainSettings = TrainSettings()
    embedder: EmbedderSettings = EmbedderSettings()
    loss: LossWeights = LossWeights()


class EvalRunConfig(Section):
    checkpoint: str
    data: DataSpec
    out: str
    top_k: int = Field(100, ge=1)
    rarity_from: str | None = None  # rarity stats json; default: the checkpoint's training stats


class PromptSpec(Section):
    objects: list[str] | None = None
    interactions: list[tuple[str, str]] | None = None  # (verb, object) terms
    exemplars: str | None = None  # JSON file: {"image": path, "object_boxes": [...], "pair_boxes": [...]}
    person: str = "person"


class PredictRunConfig(Section):
    checkpoint: str
    images: list[str] = Field(default_factory=list)
    data: str | None = None
    out: str
    prompts: PromptSpec = PromptSpec()
    top_k: int = Field(100, ge=1)
    overlay_top: int = Field(3, ge=0)
    overlay_scale: int = Field(4, ge=1)


ABLATION_TOGGLES = (
    "fsd_off", "fclip_off", "t100", "t500", "alpha_off", "beta_off",
    "lco_off", "lci_off", "text_only", "data_half", "data_quarter",
)


class AblateRunConfig(Section):
    base: TrainRunConfig
    toggles: list[str] = Field(default_factory=list)
    seeds: list[int] = Field(default_factory=lambda: [0])
    out: str


class PlotRunConfig(Section):
    input: str
    out: str
    kind: Literal["auto", "histogram", "loss"] = "auto"


SCHEMAS = {
    "merge": MergeConfig,
    "synth": SynthRunConfig,
    "train": TrainRunConfig,
    "eval": EvalRunConfig,
    "predict": PredictRunConfig,
    "ablate": AblateRunConfig,
    "plot": PlotRunConfig,
}


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ValueError(f"override {dotted}: '{k}' is not a section")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``a.b=value``; the value is parsed as YAML so numbers, bools and lists work."""
    if "=" not in text:
        raise ValueError(f"override '{text}' must look like key.path=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(command: str, path: str | None, overrides=()) -> BaseModel:
    tree = {}
    if path is not None:
        text = Path(path).read_text()
        tree = (json.loads(text) if path.endswith(".json") else yaml.safe_load(text)) or {}
        if not isinstance(tree, dict):
            raise ValueError(f"{path}: configuration must be a mapping")
    for ov in overrides:
        _set_path(tree, *parse_override(ov))
    return SCHEMAS[command].model_validate(tree)

"""Single-file checkpoints: safetensors blobs plus one JSON header in the metadata.

The header carries a format version, the model configuration, the scene
embedder spec (name, seed, vocabulary), the frozen extractor seed, the label
space and its fingerprint, and the prompt-bank ids it was trained with.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .detector import ModelConfig, MultiPromptHOIDetector
from .encoders import ToyDualEncoder, build_provider
from .label_space import UnifiedLabelSpace
from .prompts import PromptBank

FORMAT = "prompthoi-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: MultiPromptHOIDetector
    object_bank: PromptBank
    interaction_bank: PromptBank
    label_space: UnifiedLabelSpace
    extra: dict


def save_checkpoint(path, model: MultiPromptHOIDetector, object_bank: PromptBank, interaction_bank: PromptBank,
                    label_space: UnifiedLabelSpace, extra: dict | None = None) -> None:
    tensors = {f"model/{k}": v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    tensors["bank/object"] = object_bank.embeddings.contiguous().clone()
    tensors["bank/interaction"] = interaction_bank.embeddings.contiguous().clone()
    header = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.cfg.model_dump(mode="json"),
        "provider": model.provider.spec(),
        "extractor_seed": model.extractor.seed,
        "label_space": label_space.to_dict(),
        "label_space_fingerprint": label_space.fingerprint(),
        "banks": {
            b.kind: {"category_ids": list(b.category_ids), "modalities": list(b.modalities), "provider": b.provider}
            for b in (object_bank, interaction_bank)
        },
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata={FORMAT: json.dumps(header, sort_keys=True)})


def read_header(path) -> dict:
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    if FORMAT not in meta:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    header = json.loads(meta[FORMAT])
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    return header


def load_checkpoint(path) -> Checkpoint:
    header = read_header(path)
    space = UnifiedLabelSpace.from_dict(header["label_space"])
    if space.fingerprint() != header["label_space_fingerprint"]:
        raise CheckpointError("label space does not match its recorded fingerprint")
    tensors = {}
    with safe_open(str(path), framework="pt") as f:
        for k in f.keys():
            tensors[k] = f.get_tensor(k)
    provider = build_provider(header["provider"])
    model = MultiPromptHOIDetector(ModelConfig(**header["model_config"]), provider)
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    if isinstance(provider, ToyDualEncoder):
        provider.ready = True
    provider.eval()
    model.eval()
    banks = {}
    for kind in ("object", "interaction"):
        meta = header["banks"][kind]
        banks[kind] = PromptBank(kind, tuple(meta["category_ids"]), tuple(meta["modalities"]),
                                 tensors[f"bank/{kind}"], meta["provider"])
    return Checkpoint(model, banks["object"], banks["interaction"], space, header["extra"])

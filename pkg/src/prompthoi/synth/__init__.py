"""Synthetic HOI data: prompt composition, procedural rendering, filtering."""
from .pipeline import (
    FilterResult,
    SynthConfig,
    SynthSample,
    filter_samples,
    generate_corpus,
    generate_dataset,
    generate_samples,
    inverse_frequency_weights,
    plan_scene,
    toy_label_space,
    zipf_weights,
)
from .prompts import HOIPrompt, PhrasePools, compose_hoiprompt
from .world import SceneRejected, SceneSpec, render_scene

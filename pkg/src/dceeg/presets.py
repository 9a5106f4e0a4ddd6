"""Corpus class structures, prompt text, and paper-scale model presets.

The four corpus presets mirror the class structure of common seizure
datasets (multi-type, four-class clinical, binary scalp, binary neonatal)
without shipping any data. Prompt phrases are descriptive stand-ins,
deliberately free of class-index tokens.
"""
from __future__ import annotations

from .eeg_encoder import ConformerConfig
from .text_encoder import PromptTemplateSet, TextEncoderConfig

CLASS_PRESETS: dict[str, list[str]] = {
    "multitype": ["bckg", "ABSZ", "CPSZ", "FNSZ", "GNSZ", "SPSZ", "TCSZ", "TNSZ"],
    "clinical4": ["bckg", "cpsz", "electrographic", "subclinical"],
    "scalp_binary": ["bckg", "seiz"],
    "neonatal_binary": ["bckg", "seiz"],
}

CLASS_PHRASES: dict[str, str] = {
    "bckg": "normal background",
    "seiz": "generalized seizure",
    "ABSZ": "absence seizure",
    "CPSZ": "complex partial seizure",
    "FNSZ": "focal non-specific seizure",
    "GNSZ": "generalized non-specific seizure",
    "SPSZ": "simple partial seizure",
    "TCSZ": "tonic-clonic seizure",
    "TNSZ": "tonic seizure",
    "cpsz": "complex partial seizure",
    "electrographic": "electrographic seizure",
    "subclinical": "subclinical seizure without visible change",
}

DEFAULT_TEMPLATE = "eeg showing {} discharge pattern"
BACKGROUND_TEMPLATE = "eeg showing {} activity"


def default_templates(labels: list[str]) -> PromptTemplateSet:
    templates = {}
    phrases = {}
    for label in labels:
        templates[label] = BACKGROUND_TEMPLATE if label == "bckg" else DEFAULT_TEMPLATE
        phrases[label] = CLASS_PHRASES.get(label, label.lower().replace("_", " "))
    return PromptTemplateSet(templates=templates, phrases=phrases)


def teacher_paper_config() -> ConformerConfig:
    """Paper-scale teacher: 8 blocks, 10 heads, 4x feed-forward, ~30.5M
    parameters. For parameter/FLOP accounting only, never trained here."""
    return ConformerConfig(num_layers=8, num_heads=10, model_dim=520,
                           ffn_expansion=4, dropout=0.3, conv_kernel=31,
                           conv_stride=4, temporal_filters=420,
                           prompt_count_per_layer=4, latent_dim=512,
                           electrodes=19, window_samples=256)


def student_paper_config() -> ConformerConfig:
    """Paper-scale student: 4 blocks at the teacher width, a coarser
    front-end stride, and the extra projection layer (~17.7M parameters,
    about 58% of the teacher)."""
    return teacher_paper_config().student_of(num_layers=4, conv_stride=8)


def text_paper_config() -> TextEncoderConfig:
    return TextEncoderConfig(num_layers=12, num_heads=12, hidden_dim=768,
                             attention_dropout=0.2, hidden_dropout=0.2,
                             prompt_count_per_layer=4, prompt_mode="learnable",
                             max_seq_len=32, latent_dim=512)


# Ablation grid: (EEG prompts on/off) x (text prompt mode). Named variants
# follow the conventional ablation table for this architecture family.
ABLATION_VARIANTS: dict[str, tuple[bool, str]] = {
    "EEG-LP": (True, "none"),
    "Text-WP": (True, "handcrafted"),
    "Text-LP": (False, "learnable"),
    "Text-HP": (False, "handcrafted"),
    "Base-WP": (False, "none"),
    "Base-LP": (True, "learnable"),
}

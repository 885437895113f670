"""Run configuration: one JSON document with data/vqvae/transformer/generation/
eval sections. Unknown keys are rejected so typos cannot silently fall back to
defaults, and every seed lands in the output artifacts."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .generation import GenerationSchedule
from .transformer import TransformerConfig
from .vqvae import VqConfig


@dataclass
class DataSection:
    classes: int = 4
    frames: int = 64
    joints: int = 8
    train_clips: int = 512
    eval_clips: int = 128
    fps: int = 20
    source_dir: str | None = None  # read .mgrd clips instead of synthesizing


@dataclass
class VqSection:
    codes: int = 256
    d_code: int = 1024
    residual_layers: int = 5
    downscale: int = 4
    alpha: float = 1.0
    hidden: int = 64
    ema_decay: float = 0.99
    reset_threshold: float = 1.0
    reset_every: int = 50
    steps: int = 2000
    batch: int = 32
    lr: float = 2e-4
    beta2: float = 0.99  # Adam second-moment decay
    save_every: int = 0  # extra periodic checkpoints; 0 saves only the final one
    freeze_codebooks: bool = False  # skip EMA and reset entirely


@dataclass
class TransformerSection:
    layers: int = 6
    heads: int = 6
    d_model: int = 384
    ffn_mult: int = 4
    d_text: int = 512
    dropout: float = 0.0
    uncond_prob: float = 0.1
    pos_bias: bool = False
    shared_stage_tau: bool = False
    steps: int = 3000
    res_steps: int = 1500
    batch: int = 32
    lr: float = 2e-4
    beta2: float = 0.99
    save_every: int = 0


@dataclass
class GenerationSection:
    iterations: int = 10
    cfg_scale: float = 4.0
    temperature: float = 1.0
    confidence_noise: bool = False


@dataclass
class EvalSection:
    repeats: int = 20
    d_feat: int = 64
    diversity_pairs: int = 300
    rprec_pool: int = 32
    extractor_seed: int = 0


@dataclass
class AblationSection:
    seeds: int = 5
    steps: int = 400
    batch: int = 16


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    vqvae: VqSection = field(default_factory=VqSection)
    transformer: TransformerSection = field(default_factory=TransformerSection)
    generation: GenerationSection = field(default_factory=GenerationSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def vq_config(self) -> VqConfig:
        s = self.vqvae
        return VqConfig(codes=s.codes, d_code=s.d_code, residual_layers=s.residual_layers,
                        downscale=s.downscale, alpha=s.alpha, hidden=s.hidden,
                        ema_decay=s.ema_decay, reset_threshold=s.reset_threshold,
                        reset_every=s.reset_every)

    def transformer_config(self) -> TransformerConfig:
        s = self.transformer
        return TransformerConfig(layers=s.layers, heads=s.heads, d_model=s.d_model,
                                 ffn_mult=s.ffn_mult, codes=self.vqvae.codes,
                                 d_text=s.d_text, dropout=s.dropout,
                                 uncond_prob=s.uncond_prob, pos_bias=s.pos_bias)

    def schedule(self) -> GenerationSchedule:
        s = self.generation
        return GenerationSchedule(iterations=s.iterations, cfg_scale=s.cfg_scale,
                                  temperature=s.temperature,
                                  confidence_noise=s.confidence_noise)


def _build_section(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ValueError(f"section {where} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return cls(**doc)


_SECTION_TYPES = {
    "data": DataSection,
    "vqvae": VqSection,
    "transformer": TransformerSection,
    "generation": GenerationSection,
    "eval": EvalSection,
    "ablation": AblationSection,
}


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ValueError("config root must be a JSON object")
    unknown = set(doc) - ({"seed", "out_dir"} | set(_SECTION_TYPES))
    if unknown:
        raise ValueError(f"unknown key(s) in config: {sorted(unknown)}")
    kwargs = {}
    for key in ("seed", "out_dir"):
        if key in doc:
            kwargs[key] = doc[key]
    for key, cls in _SECTION_TYPES.items():
        if key in doc:
            kwargs[key] = _build_section(cls, doc[key], key)
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)

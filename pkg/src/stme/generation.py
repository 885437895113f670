"""Iterative masked decoding with confidence remasking, CFG, residual-layer
prediction, and mask-constrained editing.

Decoding starts from an all-mask map (frozen cells aside), fills every masked
cell each step by sampling the guided distribution, then keeps the most
confident fills so that exactly ceil(gamma(n/N) * free) cells stay masked for
the next step; the count hits zero at step N. Residual layers are then filled
greedily, and the stack decodes through the quantizer's decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .masking import load_mask_file, mask_ratio
from .motion import MotionGrid
from .vqvae import JointVqVae, crop_frames


@dataclass
class GenerationSchedule:
    iterations: int = 10
    cfg_scale: float = 4.0
    temperature: float = 1.0
    confidence_noise: bool = False  # gumbel-perturbed confidences, annealed to 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class EditConstraint:
    """Token ids that must survive generation; -1 marks free cells."""

    frozen_tokens: np.ndarray  # (T', J') int32

    def __post_init__(self):
        self.frozen_tokens = np.ascontiguousarray(self.frozen_tokens, dtype=np.int32)

    def frozen_mask(self) -> np.ndarray:
        return self.frozen_tokens >= 0

    def check_vocab(self, codes: int):
        mask = self.frozen_mask()
        if mask.any() and self.frozen_tokens[mask].max() >= codes:
            raise ValueError(f"frozen token id outside code range [0, {codes})")


def cfg_combine(logits_con: np.ndarray, logits_un: np.ndarray, scale: float) -> np.ndarray:
    """(1 + s) * conditional - s * unconditional, elementwise."""
    logits_con = np.asarray(logits_con)
    logits_un = np.asarray(logits_un)
    if logits_con.shape != logits_un.shape:
        raise ValueError("conditional/unconditional logits shapes disagree")
    return (1.0 + scale) * logits_con - scale * logits_un


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of (n, C) probabilities."""
    cum = probs.cumsum(axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    picked = (cum < u[:, None]).sum(axis=1)
    return np.minimum(picked, probs.shape[1] - 1)


def iterative_decode_batch(model, cond: np.ndarray, schedule: GenerationSchedule,
                           t_len: int, j_len: int, rngs: list[np.random.Generator],
                           constraints: list[EditConstraint | None] | None = None) -> np.ndarray:
    """Decode B independent base-layer maps in one model batch.

    Each sample consumes only its own rng stream, so results do not depend on
    which other samples share the batch's rng usage.
    """
    B = cond.shape[0]
    codes = model.cfg.codes
    mask_id = model.cfg.mask_token
    tokens = np.full((B, t_len, j_len), mask_id, dtype=np.int32)
    frozen = np.zeros((B, t_len, j_len), dtype=bool)
    if constraints is not None:
        for b, con in enumerate(constraints):
            if con is None:
                continue
            con.check_vocab(codes)
            fm = con.frozen_mask()
            frozen[b] = fm
            tokens[b][fm] = con.frozen_tokens[fm]
    free = (~frozen).reshape(B, -1).sum(axis=1)
    if (free == 0).all():
        return tokens
    N = schedule.iterations
    for n in range(1, N + 1):
        both = np.concatenate([tokens, tokens], axis=0)
        cond2 = np.concatenate([cond, cond], axis=0)
        uncond2 = np.concatenate([np.zeros(B), np.ones(B)])
        with T.no_grad():
            logits = model.forward_batch(both, cond2, uncond2).data
        guided = cfg_combine(logits[:B], logits[B:], schedule.cfg_scale)
        probs = _softmax_np(guided / schedule.temperature)
        keep_masked = np.array([min(int(np.ceil(mask_ratio(n / N) * f)), f) for f in free])
        for b in range(B):
            if free[b] == 0:
                continue
            masked = np.flatnonzero((tokens[b] == mask_id).reshape(-1))
            if masked.size == 0:
                continue
            rows = probs[b].reshape(-1, codes)[masked]
            sampled = _sample_rows(rows, rngs[b])
            conf = rows[np.arange(masked.size), sampled]
            if schedule.confidence_noise:
                anneal = schedule.temperature * (1.0 - n / N)
                gumbel = -np.log(-np.log(rngs[b].random(masked.size)))
                score = np.log(np.maximum(conf, 1e-30)) + anneal * gumbel
            else:
                score = conf
            flat = tokens[b].reshape(-1)
            flat[masked] = sampled
            k = keep_masked[b]
            if k > 0:
                order = np.argsort(score, kind="stable")
                flat[masked[order[:k]]] = mask_id
    return tokens


def iterative_decode(model, cond_vector: np.ndarray, schedule: GenerationSchedule,
                     t_len: int, j_len: int, rng: np.random.Generator,
                     constraint: EditConstraint | None = None) -> np.ndarray:
    """Single-map decode; returns a (T', J') base-layer map with no mask cells."""
    out = iterative_decode_batch(model, cond_vector[None], schedule, t_len, j_len,
                                 [rng], [constraint])
    return out[0]


def predict_residual_layers_batch(res_model, base: np.ndarray, cond: np.ndarray,
                                  schedule: GenerationSchedule,
                                  frozen_stack: np.ndarray | None = None,
                                  frozen_mask: np.ndarray | None = None) -> np.ndarray:
    """Greedy layer-by-layer residual prediction: (L+1, B, T', J') stack.

    With a frozen mask, those cells keep the original stack's tokens at every
    residual layer instead of the predictions.
    """
    B = base.shape[0]
    layers = [np.ascontiguousarray(base, dtype=np.int32)]
    if res_model is None:
        return np.stack(layers)
    for level in range(1, res_model.residual_layers + 1):
        summed = res_model.sum_code_vectors(layers)
        both = np.concatenate([summed, summed], axis=0)
        cond2 = np.concatenate([cond, cond], axis=0)
        uncond2 = np.concatenate([np.zeros(B), np.ones(B)])
        with T.no_grad():
            logits = res_model.forward_batch(both, level, cond2, uncond2).data
        guided = cfg_combine(logits[:B], logits[B:], schedule.cfg_scale)
        pred = guided.argmax(axis=-1).astype(np.int32)
        if frozen_mask is not None:
            pred[frozen_mask] = frozen_stack[level][frozen_mask]
        layers.append(pred)
    return np.stack(layers)


def predict_residual_layers(res_model, base: np.ndarray, cond_vector: np.ndarray,
                            schedule: GenerationSchedule) -> np.ndarray:
    """(L+1, T', J') stack grown greedily from a complete base map."""
    stack = predict_residual_layers_batch(res_model, base[None], cond_vector[None], schedule)
    return stack[:, 0]


def generate_motion(vq: JointVqVae, mask_model, res_model, cond_vector: np.ndarray,
                    frames: int, joints: int, schedule: GenerationSchedule,
                    rng: np.random.Generator, fps: int = 20,
                    label: int | None = None) -> MotionGrid:
    """Full pipeline for one clip: decode the base map, fill residual layers,
    run the quantizer's decoder. `frames` is cropped to a downscale multiple."""
    down = vq.cfg.downscale
    usable = (frames // down) * down
    if usable < down:
        raise ValueError(f"frames={frames} too short for downscale {down}")
    t_len = usable // down
    j_len = joints + 1  # global stream rides as the last column
    base = iterative_decode(mask_model, cond_vector, schedule, t_len, j_len, rng)
    stack = predict_residual_layers_batch(res_model, base[None], cond_vector[None], schedule)
    return vq.decode_tokens(stack[:, 0], fps=fps, label=label)


def generate_motion_batch(vq: JointVqVae, mask_model, res_model, cond: np.ndarray,
                          frames: int, joints: int, schedule: GenerationSchedule,
                          rngs: list[np.random.Generator], fps: int = 20,
                          labels=None) -> list[MotionGrid]:
    """Batched pipeline; sample b uses rngs[b] only."""
    down = vq.cfg.downscale
    t_len = (frames // down * down) // down
    j_len = joints + 1
    base = iterative_decode_batch(mask_model, cond, schedule, t_len, j_len, rngs)
    stack = predict_residual_layers_batch(res_model, base, cond, schedule)
    out = []
    for b in range(cond.shape[0]):
        label = None if labels is None else labels[b]
        out.append(vq.decode_tokens(stack[:, b], fps=fps, label=label))
    return out


def edit_motion(grid: MotionGrid, mask_doc, cond_vector: np.ndarray,
                schedule: GenerationSchedule, vq: JointVqVae, mask_model, res_model,
                rng: np.random.Generator):
    """Regenerate only the mask file's region; everything else keeps its tokens.

    Returns (edited MotionGrid, original stack, new stack).
    """
    grid = crop_frames(grid, vq.cfg.downscale)
    stack = vq.tokenize(grid)
    depth, t_len, j_len = stack.shape
    frozen = load_mask_file(mask_doc, t_len, j_len)
    frozen_tokens = np.where(frozen, stack[0], -1).astype(np.int32)
    constraint = EditConstraint(frozen_tokens)
    base = iterative_decode(mask_model, cond_vector, schedule, t_len, j_len, rng, constraint)
    new_stack = predict_residual_layers_batch(
        res_model, base[None], cond_vector[None], schedule,
        frozen_stack=stack[:, None], frozen_mask=frozen[None])[:, 0]
    out = vq.decode_tokens(new_stack, fps=grid.fps, label=grid.label)
    return out, stack, new_stack

"""Cosine mask schedule, temporal-then-spatial 2D masking, and token corruption.

Training picks whole frames first (every joint of a picked frame is masked),
then masks joints inside the surviving frames. Selected cells are corrupted
BERT-style: 80% mask token, 10% random token, 10% left as-is. All ops are
pure functions of an explicit rng stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

STAGE_NONE = 0
STAGE_TEMPORAL = 1
STAGE_SPATIAL = 2
STAGE_USER = 3


def mask_ratio(tau: float) -> float:
    """cos(pi*tau/2) on [0, 1]: 1 at tau=0, exactly 0 at tau=1, non-increasing."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau={tau} outside [0, 1]")
    if tau == 1.0:
        return 0.0
    return math.cos(math.pi * tau / 2.0)


@dataclass
class MaskPlan:
    selected: np.ndarray  # (T', J') bool
    stage: np.ndarray     # (T', J') int8, STAGE_* provenance per cell
    frozen: np.ndarray    # (T', J') bool, never maskable

    def __post_init__(self):
        if (self.selected & self.frozen).any():
            raise ValueError("a cell cannot be both selected and frozen")

    @property
    def shape(self):
        return self.selected.shape


def temporal_mask(t_len: int, j_len: int, tau_t: float, frozen: np.ndarray | None,
                  rng: np.random.Generator) -> MaskPlan:
    """Mask whole frames: ceil(gamma(tau_t) * T') of them, drawn uniformly among
    frames containing no frozen cell (clamped to however many are eligible)."""
    frozen = np.zeros((t_len, j_len), dtype=bool) if frozen is None else np.asarray(frozen, dtype=bool)
    if frozen.shape != (t_len, j_len):
        raise ValueError("frozen map shape mismatch")
    n_frames = min(t_len, math.ceil(mask_ratio(tau_t) * t_len))
    eligible = np.flatnonzero(~frozen.any(axis=1))
    if n_frames > 0 and eligible.size == 0:
        raise ValueError("no eligible frame to mask")
    n_frames = min(n_frames, eligible.size)
    selected = np.zeros((t_len, j_len), dtype=bool)
    stage = np.zeros((t_len, j_len), dtype=np.int8)
    if n_frames:
        keys = rng.random(eligible.size)
        picked = eligible[np.argpartition(keys, n_frames - 1)[:n_frames]]
        selected[picked] = True
        stage[picked] = STAGE_TEMPORAL
    return MaskPlan(selected, stage, frozen)


def spatial_mask(plan: MaskPlan, tau_s: float, rng: np.random.Generator) -> MaskPlan:
    """Within every temporally-unmasked frame, additionally mask
    min(free, ceil(gamma(tau_s) * J')) of its non-frozen cells."""
    t_len, j_len = plan.shape
    want = math.ceil(mask_ratio(tau_s) * j_len)
    selected = plan.selected.copy()
    stage = plan.stage.copy()
    if want:
        open_frames = np.flatnonzero(~plan.selected.any(axis=1))
        for t in open_frames:
            free = np.flatnonzero(~plan.frozen[t])
            take = min(free.size, want)
            if not take:
                continue
            keys = rng.random(free.size)
            picked = free[np.argpartition(keys, take - 1)[:take]]
            selected[t, picked] = True
            stage[t, picked] = STAGE_SPATIAL
    return MaskPlan(selected, stage, plan.frozen)


def corrupt(tokens: np.ndarray, plan: MaskPlan, codes: int,
            rng: np.random.Generator, mask_token: int | None = None) -> np.ndarray:
    """BERT-style corruption of the plan's selected cells (row-major order):
    80% -> mask token, 10% -> uniform random code, 10% -> unchanged.

    The mask token defaults to id `codes`, the first slot after the code range.
    """
    if mask_token is None:
        mask_token = codes
    if tokens.shape != plan.shape:
        raise ValueError("token map and plan shapes disagree")
    out = tokens.copy()
    cells = np.flatnonzero(plan.selected.reshape(-1))
    if cells.size == 0:
        return out
    roll = rng.random(cells.size)
    randoms = rng.integers(0, codes, size=cells.size)
    flat = out.reshape(-1)
    flat[cells[roll < 0.8]] = mask_token
    swap = (roll >= 0.8) & (roll < 0.9)
    flat[cells[swap]] = randoms[swap]
    return out


def draw_training_plan(t_len: int, j_len: int, rng: np.random.Generator,
                       shared_stage_tau: bool = False,
                       frozen: np.ndarray | None = None) -> MaskPlan:
    """One training-step plan: tau_t, tau_s ~ U(0,1) (optionally one shared draw)."""
    tau_t = float(rng.random())
    tau_s = tau_t if shared_stage_tau else float(rng.random())
    plan = temporal_mask(t_len, j_len, tau_t, frozen, rng)
    return spatial_mask(plan, tau_s, rng)


# ---------------------------------------------------------------------------
# mask files for editing: the JSON names what to regenerate, so the frozen
# region is its complement


def load_mask_file(path_or_dict, t_len: int, j_len: int) -> np.ndarray:
    """Read {"frames": [...], "cells": [[t, j], ...]} and return the frozen map."""
    if isinstance(path_or_dict, dict):
        doc = path_or_dict
    else:
        with open(path_or_dict) as fh:
            doc = json.load(fh)
    unknown = set(doc) - {"frames", "cells"}
    if unknown:
        raise ValueError(f"unknown mask file keys: {sorted(unknown)}")
    edit = np.zeros((t_len, j_len), dtype=bool)
    for t in doc.get("frames", []):
        if not 0 <= t < t_len:
            raise ValueError(f"frame {t} out of bounds [0, {t_len})")
        edit[t] = True
    for t, j in doc.get("cells", []):
        if not (0 <= t < t_len and 0 <= j < j_len):
            raise ValueError(f"cell ({t}, {j}) out of bounds")
        edit[t, j] = True
    return ~edit

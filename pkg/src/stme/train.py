"""Training loops, checkpoint wiring, RNG governance, and the 1D-vs-2D ablation.

Every loop draws from named rng streams that are snapshotted into checkpoints,
so save -> load -> continue reproduces an uninterrupted run's loss trace
bit-exactly in serial mode.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_to_dict
from .masking import corrupt, draw_training_plan
from .motion import LabelTableProvider, MotionGrid, mpjpe, read_mgrid, synth_motion
from .optim import Adam
from .rng import make_rng, restore_rng, rng_state
from .tensor import NonFiniteError, Tensor
from .transformer import MaskTransformer, ResidualTransformer, mask_loss
from .vqvae import (FeatureNorm, JointVqVae, PoseVqVae, VqConfig, codebook_reset,
                    crop_frames, ema_update, grid_to_planes, plane_loss_mask,
                    vq_loss_tensors)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# datasets


def synth_dataset(classes: int, clips: int, frames: int, joints: int, seed: int,
                  salt: str = "train", fps: int = 20) -> list[MotionGrid]:
    """Round-robin labeled clips; each clip owns an independent seed stream."""
    seeds = make_rng(seed, "dataset", salt).integers(0, 2**31 - 1, size=clips)
    return [synth_motion(i % classes, frames, joints, seed=int(seeds[i]), fps=fps)
            for i in range(clips)]


def build_datasets(cfg: RunConfig) -> tuple[list[MotionGrid], list[MotionGrid]]:
    d = cfg.data
    if d.source_dir:
        paths = sorted(p for p in os.listdir(d.source_dir) if p.endswith(".mgrd"))
        grids = [read_mgrid(os.path.join(d.source_dir, p)) for p in paths]
        if len(grids) < d.train_clips + d.eval_clips:
            raise ValueError(f"{d.source_dir} holds {len(grids)} clips, "
                             f"need {d.train_clips + d.eval_clips}")
        return grids[: d.train_clips], grids[d.train_clips : d.train_clips + d.eval_clips]
    train = synth_dataset(d.classes, d.train_clips, d.frames, d.joints, cfg.seed, "train", d.fps)
    hold = synth_dataset(d.classes, d.eval_clips, d.frames, d.joints, cfg.seed, "eval", d.fps)
    return train, hold


def common_frame_count(dataset: list[MotionGrid], downscale: int) -> int:
    frames = min(g.frames for g in dataset)
    usable = (frames // downscale) * downscale
    if usable < downscale:
        raise ValueError("dataset clips too short for the downscale factor")
    return usable


# ---------------------------------------------------------------------------
# checkpoint helpers


def _collect_state(model, opt: Adam | None) -> dict[str, np.ndarray]:
    tensors = {f"param.{name}": p.data for name, p in model.parameters()}
    if getattr(model, "norm", None) is not None:
        tensors["norm.mean"] = model.norm.mean
        tensors["norm.std"] = model.norm.std
    if hasattr(model, "all_books"):
        for bname, cb in model.all_books():
            tensors[f"book.{bname}.entries"] = cb.entries
            tensors[f"book.{bname}.usage"] = cb.usage_ema
            tensors[f"book.{bname}.cluster"] = cb.cluster_sum_ema
    if isinstance(model, ResidualTransformer):
        tensors["tables.joint"] = model.joint_tables.reshape(model.joint_tables.shape[0], -1)
        tensors["tables.global"] = model.global_tables.reshape(model.global_tables.shape[0], -1)
    if opt is not None:
        tensors.update(opt.state_tensors())
    return tensors


def _restore_state(model, tensors: dict[str, np.ndarray]):
    for name, p in model.parameters():
        arr = tensors[f"param.{name}"]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ValueError(f"checkpoint shape mismatch for {name}")
        p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)
    if "norm.mean" in tensors:
        model.norm = FeatureNorm(tensors["norm.mean"], tensors["norm.std"])
    if hasattr(model, "all_books"):
        for bname, cb in model.all_books():
            cb.entries = np.ascontiguousarray(tensors[f"book.{bname}.entries"])
            cb.usage_ema = np.ascontiguousarray(tensors[f"book.{bname}.usage"])
            cb.cluster_sum_ema = np.ascontiguousarray(tensors[f"book.{bname}.cluster"])


def _vq_section_dict(cfg: RunConfig) -> dict:
    v = cfg.vqvae
    return {"codes": v.codes, "d_code": v.d_code, "residual_layers": v.residual_layers,
            "downscale": v.downscale, "alpha": v.alpha, "hidden": v.hidden,
            "ema_decay": v.ema_decay, "reset_threshold": v.reset_threshold,
            "reset_every": v.reset_every}


def _vq_config_from(meta: dict) -> VqConfig:
    return VqConfig(**meta["vq"])


def build_vq_model(cfg: RunConfig, joints: int, pose_level: bool):
    rng = make_rng(cfg.seed, "pose-vq-model" if pose_level else "joint-vq-model")
    vq_cfg = cfg.vq_config()
    return PoseVqVae(vq_cfg, joints, rng) if pose_level else JointVqVae(vq_cfg, rng)


def load_vq_model(path):
    tensors, meta = load_checkpoint(path)
    vq_cfg = _vq_config_from(meta)
    rng = make_rng(0, "load")
    if meta["kind"] == "pose-vq":
        model = PoseVqVae(vq_cfg, meta["joints"], rng)
    else:
        model = JointVqVae(vq_cfg, rng)
    _restore_state(model, tensors)
    return model, meta


def load_mask_model(path):
    tensors, meta = load_checkpoint(path)
    from .transformer import TransformerConfig

    tf_cfg = TransformerConfig(**meta["transformer"])
    model = MaskTransformer(tf_cfg, make_rng(0, "load"))
    _restore_state(model, tensors)
    return model, meta


def load_residual_model(path):
    tensors, meta = load_checkpoint(path)
    from .transformer import TransformerConfig

    tf_cfg = TransformerConfig(**meta["transformer"])
    d_code = meta["d_code"]
    depth = meta["residual_layers"]
    codes = tf_cfg.codes
    joint_tables = tensors["tables.joint"].reshape(depth, codes, d_code)
    global_tables = tensors["tables.global"].reshape(depth, codes, d_code)
    model = ResidualTransformer(tf_cfg, depth, d_code, joint_tables, global_tables,
                                make_rng(0, "load"))
    _restore_state(model, tensors)
    return model, meta


# ---------------------------------------------------------------------------
# VQ-VAE training


def train_vqvae(cfg: RunConfig, dataset: list[MotionGrid], pose_level: bool = False,
                resume: str | None = None, out_path: str | None = None,
                steps: int | None = None, batch: int | None = None,
                log_every: int = 0):
    """EMA-codebook VQ training; returns (model, loss_history, ckpt_path)."""
    section = cfg.vqvae
    steps = section.steps if steps is None else steps
    batch = section.batch if batch is None else batch
    joints = dataset[0].joints
    model = build_vq_model(cfg, joints, pose_level)
    frames = common_frame_count(dataset, section.downscale)
    cropped = [crop_frames(g, section.downscale) for g in dataset]
    cropped = [MotionGrid(g.joint_feats[:frames], g.global_feats[:frames], g.fps, g.label)
               for g in cropped]
    if pose_level:
        planes = np.stack([model.pack(g) for g in cropped])
        loss_mask = None
    else:
        planes = np.stack([grid_to_planes(g) for g in cropped])
        loss_mask = plane_loss_mask(joints, frames)
    model.norm = FeatureNorm.fit(planes)
    targets = model.norm.normalize(planes).astype(np.float32)

    opt = Adam(model.parameters(), lr=section.lr, betas=(0.9, section.beta2))
    batch_rng = make_rng(cfg.seed, "vq-batches", int(pose_level))
    reset_rng = make_rng(cfg.seed, "vq-reset", int(pose_level))
    history: list[float] = []
    step0 = 0
    if resume:
        tensors, meta = load_checkpoint(resume)
        _restore_state(model, tensors)
        opt.load_state_tensors(tensors, meta["opt_t"])
        batch_rng = restore_rng(meta["rng"]["batch"])
        reset_rng = restore_rng(meta["rng"]["reset"])
        history = list(meta["loss_history"])
        step0 = meta["step"]

    stacks = (("pose",) if pose_level else ("joint", "global"))
    for step in range(step0, steps):
        idx = batch_rng.integers(0, len(planes), size=batch)
        try:
            v = model.encode_batch(planes[idx])
            tokens, qsum, norms, residuals = model.quantize_stack_batch(
                v.data, collect_residuals=True)
            dec_in = T.add(v, Tensor(qsum - v.data))  # straight-through
            recon = model.decode_batch(dec_in)
            loss = vq_loss_tensors(recon, targets[idx], v, qsum, section.alpha, loss_mask)
            opt.zero_grad()
            loss.backward()
            opt.step()
        except NonFiniteError as err:
            raise TrainingDiverged(
                f"vq training diverged at step {step}: {err}") from err
        if not section.freeze_codebooks:
            books = model.all_books()
            for stack_name in stacks:
                assignments, layer_inputs = residuals[stack_name]
                stack_books = [cb for name, cb in books if name.startswith(stack_name + ".")]
                for level, cb in enumerate(stack_books):
                    ema_update(cb, assignments[level], layer_inputs[level])
            if section.reset_every and (step + 1) % section.reset_every == 0:
                for stack_name in stacks:
                    assignments, layer_inputs = residuals[stack_name]
                    stack_books = [cb for name, cb in books
                                   if name.startswith(stack_name + ".")]
                    for level, cb in enumerate(stack_books):
                        codebook_reset(cb, layer_inputs[level], reset_rng)
        history.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            print(f"[vq] step {step + 1}/{steps} loss {history[-1]:.5f}", flush=True)
        if out_path and section.save_every and (step + 1) % section.save_every == 0:
            save_checkpoint(out_path, _collect_state(model, opt),
                            _vq_meta(cfg, pose_level, joints, frames, step + 1, opt,
                                     history, batch_rng, reset_rng))

    meta = _vq_meta(cfg, pose_level, joints, frames, steps, opt, history,
                    batch_rng, reset_rng)
    if out_path:
        save_checkpoint(out_path, _collect_state(model, opt), meta)
    return model, history, meta


def _vq_meta(cfg, pose_level, joints, frames, step, opt, history, batch_rng, reset_rng):
    return {
        "kind": "pose-vq" if pose_level else "joint-vq",
        "vq": _vq_section_dict(cfg),
        "joints": joints,
        "frames": frames,
        "step": step,
        "opt_t": opt.t,
        "loss_history": [float(v) for v in history],
        "rng": {"batch": rng_state(batch_rng), "reset": rng_state(reset_rng)},
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
    }


# ---------------------------------------------------------------------------
# transformer training


def tokenize_dataset(vq: JointVqVae, dataset: list[MotionGrid], chunk: int = 32):
    """Frozen-VQ token stacks for every clip: (L+1, N, T', J') plus labels."""
    frames = common_frame_count(dataset, vq.cfg.downscale)
    planes = np.stack([grid_to_planes(crop_frames(g, vq.cfg.downscale))[:, :frames]
                       for g in dataset])
    outs = []
    with T.no_grad():
        for lo in range(0, len(planes), chunk):
            lat = vq.encode_batch(planes[lo : lo + chunk])
            tokens, _, _, _ = vq.quantize_stack_batch(lat.data)
            outs.append(tokens)
    stacks = np.concatenate(outs, axis=1)
    labels = np.array([-1 if g.label is None else g.label for g in dataset])
    if (labels < 0).any():
        raise ValueError("transformer training needs labeled clips")
    return stacks, labels


def make_provider(cfg: RunConfig) -> LabelTableProvider:
    return LabelTableProvider(cfg.data.classes, cfg.transformer.d_text, seed=cfg.seed)


def train_mask_transformer(cfg: RunConfig, vq: JointVqVae, dataset: list[MotionGrid],
                           resume: str | None = None, out_path: str | None = None,
                           steps: int | None = None, log_every: int = 0):
    """Masked token prediction over the frozen tokenizer's base layer."""
    section = cfg.transformer
    steps = section.steps if steps is None else steps
    tf_cfg = cfg.transformer_config()
    model = MaskTransformer(tf_cfg, make_rng(cfg.seed, "mask-model"))
    provider = make_provider(cfg)
    stacks, labels = tokenize_dataset(vq, dataset)
    base = stacks[0]
    _, t_len, j_len = base.shape

    opt = Adam(model.parameters(), lr=section.lr, betas=(0.9, section.beta2))
    batch_rng = make_rng(cfg.seed, "mask-batches")
    plan_rng = make_rng(cfg.seed, "mask-plans")
    uncond_rng = make_rng(cfg.seed, "mask-uncond")
    drop_rng = make_rng(cfg.seed, "mask-dropout")
    history: list[float] = []
    uncond_count = 0
    step0 = 0
    if resume:
        tensors, meta = load_checkpoint(resume)
        _restore_state(model, tensors)
        opt.load_state_tensors(tensors, meta["opt_t"])
        batch_rng = restore_rng(meta["rng"]["batch"])
        plan_rng = restore_rng(meta["rng"]["plan"])
        uncond_rng = restore_rng(meta["rng"]["uncond"])
        drop_rng = restore_rng(meta["rng"]["drop"])
        history = list(meta["loss_history"])
        uncond_count = meta["uncond_count"]
        step0 = meta["step"]

    for step in range(step0, steps):
        idx = batch_rng.integers(0, base.shape[0], size=section.batch)
        targets = base[idx]
        corrupted = np.empty_like(targets)
        selected = np.zeros(targets.shape, dtype=bool)
        for b in range(section.batch):
            plan = draw_training_plan(t_len, j_len, plan_rng,
                                      shared_stage_tau=section.shared_stage_tau)
            corrupted[b] = corrupt(targets[b], plan, tf_cfg.codes, plan_rng,
                                   mask_token=tf_cfg.mask_token)
            selected[b] = plan.selected
        uncond = (uncond_rng.random(section.batch) < section.uncond_prob)
        uncond_count += int(uncond.sum())
        cond = provider.table[labels[idx]]
        try:
            logits = model.forward_batch(corrupted, cond, uncond.astype(np.float64),
                                         dropout=section.dropout, rng=drop_rng)
            loss = mask_loss(logits, targets, selected)
            opt.zero_grad()
            loss.backward()
            opt.step()
        except NonFiniteError as err:
            raise TrainingDiverged(
                f"mask-transformer training diverged at step {step}: {err}") from err
        history.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            print(f"[mask] step {step + 1}/{steps} loss {history[-1]:.5f}", flush=True)
        if out_path and section.save_every and (step + 1) % section.save_every == 0:
            save_checkpoint(out_path, _collect_state(model, opt),
                            _tf_meta("mask-transformer", cfg, tf_cfg, step + 1, opt, history,
                                     {"batch": batch_rng, "plan": plan_rng,
                                      "uncond": uncond_rng, "drop": drop_rng},
                                     uncond_count=uncond_count))

    meta = _tf_meta("mask-transformer", cfg, tf_cfg, steps, opt, history,
                    {"batch": batch_rng, "plan": plan_rng,
                     "uncond": uncond_rng, "drop": drop_rng},
                    uncond_count=uncond_count)
    if out_path:
        save_checkpoint(out_path, _collect_state(model, opt), meta)
    return model, history, meta


def _tf_meta(kind, cfg, tf_cfg, step, opt, history, rngs, **extra):
    meta = {
        "kind": kind,
        "transformer": {"layers": tf_cfg.layers, "heads": tf_cfg.heads,
                        "d_model": tf_cfg.d_model, "ffn_mult": tf_cfg.ffn_mult,
                        "codes": tf_cfg.codes, "d_text": tf_cfg.d_text,
                        "dropout": tf_cfg.dropout, "uncond_prob": tf_cfg.uncond_prob,
                        "pos_bias": tf_cfg.pos_bias},
        "classes": cfg.data.classes,
        "provider_seed": cfg.seed,
        "step": step,
        "opt_t": opt.t,
        "loss_history": [float(v) for v in history],
        "rng": {name: rng_state(r) for name, r in rngs.items()},
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
    }
    meta.update({k: (int(v) if isinstance(v, (int, np.integer)) else v)
                 for k, v in extra.items()})
    return meta


def train_residual_transformer(cfg: RunConfig, vq: JointVqVae, dataset: list[MotionGrid],
                               resume: str | None = None, out_path: str | None = None,
                               steps: int | None = None, log_every: int = 0):
    """Per step, pick one residual layer uniformly and learn it from the summed
    code vectors of the layers below."""
    section = cfg.transformer
    steps = section.res_steps if steps is None else steps
    depth = cfg.vqvae.residual_layers
    if depth < 1:
        raise ValueError("residual transformer needs residual_layers >= 1")
    tf_cfg = cfg.transformer_config()
    joint_tables = np.stack([vq.joint_books[k].entries for k in range(depth)])
    global_tables = np.stack([vq.global_books[k].entries for k in range(depth)])
    model = ResidualTransformer(tf_cfg, depth, cfg.vqvae.d_code, joint_tables,
                                global_tables, make_rng(cfg.seed, "res-model"))
    provider = make_provider(cfg)
    stacks, labels = tokenize_dataset(vq, dataset)

    opt = Adam(model.parameters(), lr=section.lr, betas=(0.9, section.beta2))
    batch_rng = make_rng(cfg.seed, "res-batches")
    layer_rng = make_rng(cfg.seed, "res-layers")
    uncond_rng = make_rng(cfg.seed, "res-uncond")
    drop_rng = make_rng(cfg.seed, "res-dropout")
    history: list[float] = []
    step0 = 0
    if resume:
        tensors, meta = load_checkpoint(resume)
        _restore_state(model, tensors)
        opt.load_state_tensors(tensors, meta["opt_t"])
        batch_rng = restore_rng(meta["rng"]["batch"])
        layer_rng = restore_rng(meta["rng"]["layer"])
        uncond_rng = restore_rng(meta["rng"]["uncond"])
        drop_rng = restore_rng(meta["rng"]["drop"])
        history = list(meta["loss_history"])
        step0 = meta["step"]

    for step in range(step0, steps):
        idx = batch_rng.integers(0, stacks.shape[1], size=section.batch)
        level = int(layer_rng.integers(1, depth + 1))
        prefix = model.sum_code_vectors([stacks[k][idx] for k in range(level)])
        targets = stacks[level][idx]
        uncond = (uncond_rng.random(section.batch) < section.uncond_prob)
        cond = provider.table[labels[idx]]
        try:
            logits = model.forward_batch(prefix, level, cond, uncond.astype(np.float64),
                                         dropout=section.dropout, rng=drop_rng)
            loss = mask_loss(logits, targets, np.ones(targets.shape, dtype=bool))
            opt.zero_grad()
            loss.backward()
            opt.step()
        except NonFiniteError as err:
            raise TrainingDiverged(
                f"residual-transformer training diverged at step {step}: {err}") from err
        history.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            print(f"[res] step {step + 1}/{steps} loss {history[-1]:.5f}", flush=True)
        if out_path and section.save_every and (step + 1) % section.save_every == 0:
            save_checkpoint(out_path, _collect_state(model, opt),
                            _tf_meta("residual-transformer", cfg, tf_cfg, step + 1, opt,
                                     history,
                                     {"batch": batch_rng, "layer": layer_rng,
                                      "uncond": uncond_rng, "drop": drop_rng},
                                     residual_layers=depth, d_code=cfg.vqvae.d_code))

    meta = _tf_meta("residual-transformer", cfg, tf_cfg, steps, opt, history,
                    {"batch": batch_rng, "layer": layer_rng,
                     "uncond": uncond_rng, "drop": drop_rng},
                    residual_layers=depth, d_code=cfg.vqvae.d_code)
    if out_path:
        save_checkpoint(out_path, _collect_state(model, opt), meta)
    return model, history, meta


# ---------------------------------------------------------------------------
# ablation: joint-level 2D quantizer vs pose-level 1D baseline


@dataclass
class AblationRow:
    system: str
    seed: int
    held_out_mpjpe: float
    codebook_params: int


def eval_reconstruction_mpjpe(model, dataset: list[MotionGrid], downscale: int) -> float:
    values = []
    for grid in dataset:
        cropped = crop_frames(grid, downscale)
        values.append(mpjpe(model.reconstruct(cropped), cropped))
    return float(np.mean(values))


def run_ablation(cfg: RunConfig, log_every: int = 0) -> tuple[list[AblationRow], str, int]:
    """Train both quantizers at a matched codebook budget over several seeds.

    Returns (rows, csv text, number of seeds where the 2D model won).
    """
    train, hold = build_datasets(cfg)
    rows: list[AblationRow] = []
    wins = 0
    for s in range(cfg.ablation.seeds):
        sub = copy.deepcopy(cfg)
        sub.seed = cfg.seed + 1000 + s
        joint_model, _, _ = train_vqvae(sub, train, pose_level=False,
                                        steps=cfg.ablation.steps, batch=cfg.ablation.batch,
                                        log_every=log_every)
        pose_model, _, _ = train_vqvae(sub, train, pose_level=True,
                                       steps=cfg.ablation.steps, batch=cfg.ablation.batch,
                                       log_every=log_every)
        bj = joint_model.codebook_param_count()
        bp = pose_model.codebook_param_count()
        if abs(bj - bp) > 0.01 * max(bj, bp):
            raise ValueError(f"codebook budgets diverge: {bj} vs {bp}")
        mj = eval_reconstruction_mpjpe(joint_model, hold, cfg.vqvae.downscale)
        mp = eval_reconstruction_mpjpe(pose_model, hold, cfg.vqvae.downscale)
        rows.append(AblationRow("joint2d", sub.seed, mj, bj))
        rows.append(AblationRow("pose1d", sub.seed, mp, bp))
        wins += mj < mp
        if log_every:
            print(f"[ablate] seed {sub.seed}: joint2d {mj:.2f} mm vs pose1d {mp:.2f} mm",
                  flush=True)
    lines = ["system,seed,held_out_mpjpe_mm,codebook_params"]
    for row in rows:
        lines.append(f"{row.system},{row.seed},{row.held_out_mpjpe:.4f},{row.codebook_params}")
    lines.append(f"# joint2d wins {wins}/{cfg.ablation.seeds}")
    return rows, "\n".join(lines) + "\n", wins

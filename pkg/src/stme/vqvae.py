"""Joint-level spatial-temporal VQ-VAE with a residual quantizer stack.

The encoder maps a motion grid (12 channels over time x joint columns, the
global stream riding along as one extra column) to per-cell latents on the
temporally-downscaled map. Each cell is snapped to its nearest code; residual
layers quantize what the running sum leaves behind. Codebooks learn by EMA
with dead-code reset; the autoencoder trains with an L1 reconstruction term
plus a commitment term, gradients crossing the quantizer straight-through.

A pose-level 1D variant (one token per frame, matched codebook budget) exists
solely for the quantization ablation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .motion import GLOBAL_DIM, JOINT_DIM, MotionGrid
from .tensor import Module, Tensor, add, conv2d, init_uniform, relu, repeat_axis, reshape

_SMOOTH_EPS = 1e-5


@dataclass
class VqConfig:
    codes: int = 256          # C
    d_code: int = 1024
    residual_layers: int = 5  # L; total quantizer depth is L+1
    downscale: int = 4        # temporal only
    alpha: float = 1.0        # commitment weight
    hidden: int = 64          # conv width
    ema_decay: float = 0.99
    reset_threshold: float = 1.0
    reset_every: int = 50

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.downscale not in (1, 2, 4):
            raise ValueError("downscale must be one of 1, 2, 4")
        if self.codes < 2:
            raise ValueError("need at least 2 codes")


class Codebook:
    """C code vectors with EMA usage statistics.

    Stats use the decay-then-add recurrence: both EMA buffers are scaled by
    `decay` each update, then batch counts/sums are added and entries of codes
    seen in the batch are recomputed as cluster_sum/usage (Laplace-smoothed).
    Entry 0 of a frozen_zero book is pinned to the zero vector forever, which
    makes the residual stack's per-cell norms non-increasing by construction.
    """

    def __init__(self, codes: int, d_code: int, rng: np.random.Generator,
                 decay: float = 0.99, frozen_zero: bool = False,
                 reset_threshold: float = 1.0):
        if codes < 2:
            raise ValueError("need at least 2 codes")
        self.decay = decay
        self.frozen_zero = frozen_zero
        self.reset_threshold = reset_threshold
        scale = 1.0 / np.sqrt(d_code)
        self.entries = (rng.standard_normal((codes, d_code)) * scale).astype(np.float32)
        if frozen_zero:
            self.entries[0] = 0.0
        self.usage_ema = np.ones(codes, dtype=np.float32)
        self.cluster_sum_ema = self.entries.copy()

    @property
    def codes(self) -> int:
        return self.entries.shape[0]

    @property
    def d_code(self) -> int:
        return self.entries.shape[1]


def nearest_indices(vectors: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the L2-nearest entry per row; ties break to the lowest index.

    Distances are evaluated in float64 so the argmin agrees with a direct
    exhaustive scan.
    """
    if entries.shape[0] == 0:
        raise ValueError("empty codebook")
    if vectors.shape[-1] != entries.shape[1]:
        raise ValueError(f"latent dim {vectors.shape[-1]} != code dim {entries.shape[1]}")
    v = vectors.astype(np.float64)
    e = entries.astype(np.float64)
    d2 = (v * v).sum(axis=1)[:, None] - 2.0 * (v @ e.T) + (e * e).sum(axis=1)[None, :]
    return d2.argmin(axis=1).astype(np.int32)


def quantize_nearest(lat: np.ndarray, cb: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Snap each cell of a (T', J', d) latent grid to its nearest code."""
    cells = lat.reshape(-1, lat.shape[-1])
    idx = nearest_indices(cells, cb.entries)
    selected = cb.entries[idx].reshape(lat.shape)
    return idx.reshape(lat.shape[:-1]), selected


def residual_quantize_cells(cells: np.ndarray, books: list[Codebook],
                            collect_residuals: bool = False):
    """Quantize (n, d) cells through a codebook stack.

    Returns (indices (L+1, n), quantized_sum (n, d), norms (L+1, n), layer_inputs).
    quantized_sum accumulates selected entries in layer order in float32, so it
    equals the explicit per-cell sum bit-for-bit. norms[l] is the float64 L2
    norm of the residual remaining after layers 0..l.
    """
    n, d = cells.shape
    depth = len(books)
    residual = cells.astype(np.float32).copy()
    qsum = np.zeros_like(residual)
    idxs = np.empty((depth, n), dtype=np.int32)
    norms = np.empty((depth, n), dtype=np.float64)
    layer_inputs = [] if collect_residuals else None
    for level, cb in enumerate(books):
        if collect_residuals:
            layer_inputs.append(residual.copy())
        idx = nearest_indices(residual, cb.entries)
        selected = cb.entries[idx]
        qsum += selected
        residual -= selected
        idxs[level] = idx
        norms[level] = np.sqrt((residual.astype(np.float64) ** 2).sum(axis=1))
    return idxs, qsum, norms, layer_inputs


def residual_quantize(lat: np.ndarray, books: list[Codebook]):
    """Grid-shaped wrapper over residual_quantize_cells for a (T', J', d) latent."""
    cells = lat.reshape(-1, lat.shape[-1])
    idxs, qsum, norms, _ = residual_quantize_cells(cells, books)
    grid_shape = lat.shape[:-1]
    return (idxs.reshape((len(books),) + grid_shape),
            qsum.reshape(lat.shape),
            norms.reshape((len(books),) + grid_shape))


def ema_update(cb: Codebook, assignments: np.ndarray, latents: np.ndarray):
    """Decay both EMA buffers, add this batch, refresh entries of assigned codes."""
    C, d = cb.entries.shape
    cb.usage_ema *= cb.decay
    cb.cluster_sum_ema *= cb.decay
    assignments = np.asarray(assignments).reshape(-1)
    latents = np.asarray(latents, dtype=np.float32).reshape(-1, d)
    if assignments.size:
        counts = np.bincount(assignments, minlength=C).astype(np.float32)
        sums = np.zeros_like(cb.cluster_sum_ema)
        np.add.at(sums, assignments, latents)
        cb.usage_ema += counts
        cb.cluster_sum_ema += sums
        assigned = counts > 0
    else:
        assigned = np.zeros(C, dtype=bool)
    if cb.frozen_zero:
        assigned[0] = False
    if assigned.any():
        total = cb.usage_ema.sum()
        smoothed = (cb.usage_ema + _SMOOTH_EPS) / (total + C * _SMOOTH_EPS) * total
        cb.entries[assigned] = cb.cluster_sum_ema[assigned] / smoothed[assigned, None]


def codebook_reset(cb: Codebook, encoder_outputs: np.ndarray, rng: np.random.Generator) -> int:
    """Replace codes whose usage fell below the book's threshold with uniformly
    sampled encoder outputs. Returns the number of codes reset; the frozen zero
    entry is never touched. Stats of reset codes restart at usage 1."""
    encoder_outputs = np.asarray(encoder_outputs, dtype=np.float32).reshape(-1, cb.d_code)
    if encoder_outputs.shape[0] == 0:
        raise ValueError("no encoder outputs available for reset")
    dead = cb.usage_ema < cb.reset_threshold
    if cb.frozen_zero:
        dead[0] = False
    count = int(dead.sum())
    if count:
        picks = rng.integers(0, encoder_outputs.shape[0], size=count)
        cb.entries[dead] = encoder_outputs[picks]
        cb.usage_ema[dead] = 1.0
        cb.cluster_sum_ema[dead] = cb.entries[dead]
    return count


class FeatureNorm:
    """Per-dimension normalization fitted on the training planes.

    Each (channel, column) entry gets its own mean/std over clips and frames,
    so meter-scale positions and unit-scale rotations train on equal footing.
    """

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)

    @classmethod
    def identity(cls, channels: int, cols: int) -> "FeatureNorm":
        return cls(np.zeros((channels, 1, cols), np.float32),
                   np.ones((channels, 1, cols), np.float32))

    @classmethod
    def fit(cls, planes: np.ndarray, floor: float = 1e-2) -> "FeatureNorm":
        mean = planes.mean(axis=(0, 2), keepdims=True)[0]
        std = np.maximum(planes.std(axis=(0, 2), keepdims=True)[0], floor)
        return cls(mean, std)

    def normalize(self, planes: np.ndarray) -> np.ndarray:
        return (planes - self.mean) / self.std

    def denormalize(self, planes: np.ndarray) -> np.ndarray:
        return planes * self.std + self.mean


# ---------------------------------------------------------------------------
# grid packing: MotionGrid <-> channel planes with the global stream as one
# extra joint column (its 11 dims zero-padded to the 12-channel layout)


def grid_to_planes(grid: MotionGrid) -> np.ndarray:
    T_, J = grid.frames, grid.joints
    planes = np.zeros((JOINT_DIM, T_, J + 1), dtype=np.float32)
    planes[:, :, :J] = grid.joint_feats.transpose(2, 0, 1)
    planes[:GLOBAL_DIM, :, J] = grid.global_feats.T
    return planes


def planes_to_grid(planes: np.ndarray, fps: int = 20, label: int | None = None) -> MotionGrid:
    J = planes.shape[2] - 1
    joint = np.ascontiguousarray(planes[:, :, :J].transpose(1, 2, 0))
    glob = np.ascontiguousarray(planes[:GLOBAL_DIM, :, J].T)
    glob[:, 7:11] = np.clip(glob[:, 7:11], 0.0, 1.0)  # contacts must stay in [0, 1]
    return MotionGrid(joint, glob, fps=fps, label=label)


def crop_frames(grid: MotionGrid, multiple: int) -> MotionGrid:
    """Crop to the largest frame count divisible by `multiple`."""
    T_ = (grid.frames // multiple) * multiple
    if T_ < multiple:
        raise ValueError(f"clip too short: {grid.frames} frames, need >= {multiple}")
    if T_ == grid.frames:
        return grid
    return MotionGrid(grid.joint_feats[:T_], grid.global_feats[:T_], fps=grid.fps, label=grid.label)


# ---------------------------------------------------------------------------
# conv building blocks


class Conv2dLayer(Module):
    def __init__(self, cin, cout, kernel, rng, stride=(1, 1), pad=(0, 0), dtype=np.float32):
        kh, kw = kernel
        self.stride = stride
        self.pad = pad
        self.w = init_uniform(rng, (cout, cin, kh, kw), fan_in=cin * kh * kw, dtype=dtype)
        self.b = T.zeros_param((cout,), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ConvResBlock(Module):
    """Residual block of a 3x1 (time) conv followed by a 1x3 (joint) conv."""

    def __init__(self, channels, rng, dtype=np.float32):
        self.conv_t = Conv2dLayer(channels, channels, (3, 1), rng, pad=(1, 0), dtype=dtype)
        self.conv_j = Conv2dLayer(channels, channels, (1, 3), rng, pad=(0, 1), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv_t(relu(x))
        h = self.conv_j(relu(h))
        return add(x, h)


class _ConvStack(Module):
    """Shared encoder/decoder skeleton: stem, per-stage temporal resampling with
    one residual block each (two stages at downscale 4), and a 1x1 head."""

    def __init__(self, cin, cout, hidden, stages, rng, direction, dtype=np.float32):
        self.direction = direction
        self.stages = stages
        if direction == "down":
            self.stem = Conv2dLayer(cin, hidden, (3, 1), rng, pad=(1, 0), dtype=dtype)
            self.resample = [
                Conv2dLayer(hidden, hidden, (4, 1), rng, stride=(2, 1), pad=(1, 0), dtype=dtype)
                for _ in range(stages)
            ]
        else:
            self.stem = Conv2dLayer(cin, hidden, (1, 1), rng, dtype=dtype)
            self.resample = [
                Conv2dLayer(hidden, hidden, (3, 1), rng, pad=(1, 0), dtype=dtype)
                for _ in range(stages)
            ]
        self.blocks = [ConvResBlock(hidden, rng, dtype=dtype) for _ in range(max(stages, 1))]
        head_kernel = (1, 1) if direction == "down" else (3, 1)
        head_pad = (0, 0) if direction == "down" else (1, 0)
        self.head = Conv2dLayer(hidden, cout, head_kernel, rng, pad=head_pad, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        if self.stages == 0:
            h = self.blocks[0](h)
        elif self.direction == "down":
            for conv, block in zip(self.resample, self.blocks):
                h = block(conv(relu(h)))
        else:
            for conv, block in zip(self.resample, self.blocks):
                h = conv(relu(repeat_axis(block(h), 2, axis=2)))
        return self.head(relu(h))


class JointVqVae(Module):
    """Spatial-temporal joint tokenizer: T x (J+1) grid -> (T/downscale) x (J+1)
    token map per quantizer layer, with separate joint and global codebook stacks."""

    def __init__(self, cfg: VqConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.norm: FeatureNorm | None = None  # fitted by the trainer
        stages = {1: 0, 2: 1, 4: 2}[cfg.downscale]
        self.encoder = _ConvStack(JOINT_DIM, cfg.d_code, cfg.hidden, stages, rng, "down", dtype)
        self.decoder = _ConvStack(cfg.d_code, JOINT_DIM, cfg.hidden, stages, rng, "up", dtype)
        depth = cfg.residual_layers + 1
        self.joint_books = [
            Codebook(cfg.codes, cfg.d_code, rng, decay=cfg.ema_decay,
                     frozen_zero=(level > 0), reset_threshold=cfg.reset_threshold)
            for level in range(depth)
        ]
        self.global_books = [
            Codebook(cfg.codes, cfg.d_code, rng, decay=cfg.ema_decay,
                     frozen_zero=(level > 0), reset_threshold=cfg.reset_threshold)
            for level in range(depth)
        ]

    @property
    def depth(self) -> int:
        return self.cfg.residual_layers + 1

    # ---- batched internals (planes: (B, 12, T, J+1)) ----

    def encode_batch(self, planes: np.ndarray) -> Tensor:
        B, C, T_, Jp = planes.shape
        if T_ % self.cfg.downscale:
            raise ValueError(f"T={T_} not divisible by downscale {self.cfg.downscale}")
        if self.norm is not None:
            planes = self.norm.normalize(planes)
        return self.encoder(Tensor(np.ascontiguousarray(planes, dtype=np.float32)))

    def decode_batch(self, lat: Tensor) -> Tensor:
        """Decoder output in the model's normalized feature space."""
        return self.decoder(lat)

    def _planes_out(self, planes: np.ndarray) -> np.ndarray:
        return self.norm.denormalize(planes) if self.norm is not None else planes

    def quantize_stack_batch(self, lat: np.ndarray, collect_residuals: bool = False):
        """lat: (B, d, T', J'). Returns (tokens (L+1, B, T', J'), qsum like lat,
        norms (L+1, B, T', J'), per-stack training residuals)."""
        B, d, Tq, Jp = lat.shape
        J = Jp - 1
        cells = lat.transpose(0, 2, 3, 1)  # (B, T', J', d)
        joint_cells = cells[:, :, :J, :].reshape(-1, d)
        glob_cells = cells[:, :, J:, :].reshape(-1, d)
        j_idx, j_sum, j_norms, j_res = residual_quantize_cells(
            joint_cells, self.joint_books, collect_residuals)
        g_idx, g_sum, g_norms, g_res = residual_quantize_cells(
            glob_cells, self.global_books, collect_residuals)
        depth = self.depth
        tokens = np.empty((depth, B, Tq, Jp), dtype=np.int32)
        tokens[:, :, :, :J] = j_idx.reshape(depth, B, Tq, J)
        tokens[:, :, :, J:] = g_idx.reshape(depth, B, Tq, 1)
        qsum = np.empty((B, Tq, Jp, d), dtype=np.float32)
        qsum[:, :, :J, :] = j_sum.reshape(B, Tq, J, d)
        qsum[:, :, J:, :] = g_sum.reshape(B, Tq, 1, d)
        norms = np.empty((depth, B, Tq, Jp), dtype=np.float64)
        norms[:, :, :, :J] = j_norms.reshape(depth, B, Tq, J)
        norms[:, :, :, J:] = g_norms.reshape(depth, B, Tq, 1)
        residuals = {"joint": (j_idx, j_res), "global": (g_idx, g_res)} if collect_residuals else None
        return tokens, np.ascontiguousarray(qsum.transpose(0, 3, 1, 2)), norms, residuals

    def embed_tokens(self, tokens: np.ndarray) -> np.ndarray:
        """Sum codebook entries for a (L+1, B, T', J') token stack -> (B, d, T', J')."""
        depth, B, Tq, Jp = tokens.shape
        J = Jp - 1
        d = self.cfg.d_code
        out = np.zeros((B, Tq, Jp, d), dtype=np.float32)
        for level in range(depth):
            out[:, :, :J, :] += self.joint_books[level].entries[tokens[level, :, :, :J]]
            out[:, :, J:, :] += self.global_books[level].entries[tokens[level, :, :, J:]]
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def embed_token_prefix(self, layers: list[np.ndarray]) -> np.ndarray:
        """Sum entries of layers [0:l] for (B, T', J') maps -> (B, T', J', d)."""
        B, Tq, Jp = layers[0].shape
        J = Jp - 1
        out = np.zeros((B, Tq, Jp, self.cfg.d_code), dtype=np.float32)
        for level, layer in enumerate(layers):
            out[:, :, :J, :] += self.joint_books[level].entries[layer[:, :, :J]]
            out[:, :, J:, :] += self.global_books[level].entries[layer[:, :, J:]]
        return out

    # ---- single-clip API ----

    def encode(self, grid: MotionGrid) -> np.ndarray:
        """(T', J+1, d_code) latent for one clip (frames already a downscale multiple)."""
        planes = grid_to_planes(grid)[None]
        with T.no_grad():
            lat = self.encode_batch(planes)
        return np.ascontiguousarray(lat.data[0].transpose(1, 2, 0))

    def tokenize(self, grid: MotionGrid) -> np.ndarray:
        """(L+1, T', J+1) token stack for one clip."""
        lat = self.encode(grid)
        cells = np.ascontiguousarray(lat.transpose(2, 0, 1))[None]
        tokens, _, _, _ = self.quantize_stack_batch(cells)
        return tokens[:, 0]

    def decode(self, lat: np.ndarray, fps: int = 20, label: int | None = None) -> MotionGrid:
        """Decode a (T', J+1, d_code) latent to a MotionGrid."""
        x = np.ascontiguousarray(lat.transpose(2, 0, 1), dtype=np.float32)[None]
        with T.no_grad():
            planes = self.decode_batch(Tensor(x))
        return planes_to_grid(self._planes_out(planes.data[0]), fps=fps, label=label)

    def decode_tokens(self, tokens: np.ndarray, fps: int = 20, label: int | None = None) -> MotionGrid:
        """Decode a (L+1, T', J+1) token stack to a MotionGrid."""
        qsum = self.embed_tokens(tokens[:, None])
        with T.no_grad():
            planes = self.decode_batch(Tensor(qsum))
        return planes_to_grid(self._planes_out(planes.data[0]), fps=fps, label=label)

    def reconstruct(self, grid: MotionGrid) -> MotionGrid:
        return self.decode_tokens(self.tokenize(grid), fps=grid.fps, label=grid.label)

    def all_books(self) -> list[tuple[str, Codebook]]:
        out = [(f"joint.{i}", cb) for i, cb in enumerate(self.joint_books)]
        out += [(f"global.{i}", cb) for i, cb in enumerate(self.global_books)]
        return out

    def codebook_param_count(self) -> int:
        return sum(cb.entries.size for _, cb in self.all_books())


class PoseVqVae(Module):
    """Pose-level 1D baseline: whole frames as single columns, one token per
    frame, code dimension doubled so the codebook parameter budget matches the
    joint model's two stacks."""

    def __init__(self, cfg: VqConfig, joints: int, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.joints = joints
        self.norm: FeatureNorm | None = None
        self.in_dim = JOINT_DIM * joints + GLOBAL_DIM
        self.d_code = 2 * cfg.d_code
        stages = {1: 0, 2: 1, 4: 2}[cfg.downscale]
        self.encoder = _ConvStack(self.in_dim, self.d_code, cfg.hidden, stages, rng, "down", dtype)
        self.decoder = _ConvStack(self.d_code, self.in_dim, cfg.hidden, stages, rng, "up", dtype)
        self.books = [
            Codebook(cfg.codes, self.d_code, rng, decay=cfg.ema_decay,
                     frozen_zero=(level > 0), reset_threshold=cfg.reset_threshold)
            for level in range(cfg.residual_layers + 1)
        ]

    @property
    def depth(self) -> int:
        return self.cfg.residual_layers + 1

    def codebook_param_count(self) -> int:
        return sum(cb.entries.size for cb in self.books)

    def pack(self, grid: MotionGrid) -> np.ndarray:
        """(in_dim, T, 1) frame-vector planes."""
        T_ = grid.frames
        flat = np.concatenate(
            [grid.joint_feats.reshape(T_, -1), grid.global_feats], axis=1)
        return np.ascontiguousarray(flat.T, dtype=np.float32)[:, :, None]

    def unpack(self, planes: np.ndarray, fps: int = 20, label: int | None = None) -> MotionGrid:
        flat = planes[:, :, 0].T
        T_ = flat.shape[0]
        joint = flat[:, : JOINT_DIM * self.joints].reshape(T_, self.joints, JOINT_DIM)
        glob = np.ascontiguousarray(flat[:, JOINT_DIM * self.joints :])
        glob[:, 7:11] = np.clip(glob[:, 7:11], 0.0, 1.0)
        return MotionGrid(joint, glob, fps=fps, label=label)

    def encode_batch(self, planes: np.ndarray) -> Tensor:
        if planes.shape[2] % self.cfg.downscale:
            raise ValueError("T not divisible by downscale")
        if self.norm is not None:
            planes = self.norm.normalize(planes)
        return self.encoder(Tensor(np.ascontiguousarray(planes, dtype=np.float32)))

    def decode_batch(self, lat: Tensor) -> Tensor:
        return self.decoder(lat)

    def _planes_out(self, planes: np.ndarray) -> np.ndarray:
        return self.norm.denormalize(planes) if self.norm is not None else planes

    def quantize_stack_batch(self, lat: np.ndarray, collect_residuals: bool = False):
        B, d, Tq, one = lat.shape
        cells = lat.transpose(0, 2, 3, 1).reshape(-1, d)
        idxs, qsum, norms, res = residual_quantize_cells(cells, self.books, collect_residuals)
        depth = self.depth
        tokens = idxs.reshape(depth, B, Tq, 1)
        qsum = np.ascontiguousarray(qsum.reshape(B, Tq, 1, d).transpose(0, 3, 1, 2))
        residuals = {"pose": (idxs, res)} if collect_residuals else None
        return tokens, qsum, norms.reshape(depth, B, Tq, 1), residuals

    def reconstruct(self, grid: MotionGrid) -> MotionGrid:
        planes = self.pack(grid)[None]
        with T.no_grad():
            lat = self.encode_batch(planes)
            _, qsum, _, _ = self.quantize_stack_batch(lat.data)
            out = self.decode_batch(Tensor(qsum))
        return self.unpack(self._planes_out(out.data[0]), fps=grid.fps, label=grid.label)

    def all_books(self) -> list[tuple[str, Codebook]]:
        return [(f"pose.{i}", cb) for i, cb in enumerate(self.books)]


# ---------------------------------------------------------------------------
# training loss


def vq_loss_tensors(recon: Tensor, target: np.ndarray, v: Tensor, v_q: np.ndarray,
                    alpha: float, recon_weight_mask: np.ndarray | None = None) -> Tensor:
    """mean |recon - target| + alpha * mean (v - stopgrad(v_q))^2.

    recon/target are channel planes; an optional 0/1 mask excludes the padded
    global channels from the reconstruction mean.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    diff = T.absolute(T.sub(recon, Tensor(np.asarray(target, dtype=recon.dtype.type))))
    if recon_weight_mask is not None:
        mask = np.asarray(recon_weight_mask, dtype=recon.dtype.type)
        count = float(mask.sum()) * (diff.size / mask.size)  # mask broadcasts over batch
        rec = T.mul(T.tsum(T.mul(diff, Tensor(mask))), 1.0 / count)
    else:
        rec = T.tmean(diff)
    commit_diff = T.sub(v, Tensor(np.asarray(v_q, dtype=v.dtype.type)))
    commit = T.tmean(T.mul(commit_diff, commit_diff))
    return T.add(rec, T.mul(commit, float(alpha)))


def vq_loss(recon: MotionGrid, target: MotionGrid, v: np.ndarray, v_q: np.ndarray,
            alpha: float) -> float:
    """Loss value over plain motion grids, no gradients involved."""
    if recon.joint_feats.shape != target.joint_feats.shape:
        raise ValueError("recon/target shape mismatch")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    l1 = float(
        np.concatenate([
            np.abs(recon.joint_feats - target.joint_feats).reshape(-1),
            np.abs(recon.global_feats - target.global_feats).reshape(-1),
        ]).mean()
    )
    commit = float(((np.asarray(v) - np.asarray(v_q)) ** 2).mean())
    return l1 + alpha * commit


def plane_loss_mask(joints: int, frames: int) -> np.ndarray:
    """1 over real motion channels, 0 over the global column's pad channel."""
    mask = np.ones((JOINT_DIM, frames, joints + 1), dtype=np.float32)
    mask[GLOBAL_DIM:, :, joints] = 0.0
    return mask


"""Evaluation suite: FID, R-precision, MM-Dist, Diversity, plus the frozen
desk-scale feature extractor and a repeat/confidence-interval reporter.

The extractor applies a seeded random linear map to every frame vector and
concatenates the temporal mean and standard deviation (64 dims by default).
Condition features come from the label-embedding table through a second
frozen linear map, calibrated once against reference class centroids so that
motion and condition features live in the same space.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .motion import LabelTableProvider, MotionGrid
from .parallel import worker_map
from .rng import make_rng


class FeatureExtractor:
    def __init__(self, joints: int, d_feat: int = 64, d_text: int = 512, seed: int = 0):
        if d_feat % 2:
            raise ValueError("d_feat must be even (mean ++ std halves)")
        self.joints = joints
        self.d_feat = d_feat
        self.d_text = d_text
        self.seed = seed
        d_in = 12 * joints + 11
        rng = make_rng(seed, "extractor")
        self.w_frame = (rng.standard_normal((d_in, d_feat // 2)) / np.sqrt(d_in)).astype(np.float32)
        self.w_cond: np.ndarray | None = None
        self.extractor_id = f"frame-linear-meanstd/j{joints}/d{d_feat}"

    def _frame_matrix(self, grid: MotionGrid) -> np.ndarray:
        T = grid.frames
        return np.concatenate([grid.joint_feats.reshape(T, -1), grid.global_feats], axis=1)

    def motion_features(self, grids: list[MotionGrid]) -> np.ndarray:
        out = np.empty((len(grids), self.d_feat), dtype=np.float64)
        for i, grid in enumerate(grids):
            z = self._frame_matrix(grid).astype(np.float64) @ self.w_frame.astype(np.float64)
            out[i, : self.d_feat // 2] = z.mean(axis=0)
            out[i, self.d_feat // 2 :] = z.std(axis=0)
        return out

    def calibrate_conditions(self, ref_grids: list[MotionGrid], ref_labels,
                             provider: LabelTableProvider):
        """Fit the frozen condition map: least-squares from label embeddings to
        reference class centroids. Must run on reference data before any
        condition features are produced."""
        feats = self.motion_features(ref_grids)
        labels = np.asarray(ref_labels)
        uniq = np.unique(labels)
        emb = np.stack([provider.embed(int(c)).vector for c in uniq]).astype(np.float64)
        centroids = np.stack([feats[labels == c].mean(axis=0) for c in uniq])
        self.w_cond, *_ = np.linalg.lstsq(emb, centroids, rcond=None)

    def cond_features(self, labels, provider: LabelTableProvider) -> np.ndarray:
        if self.w_cond is None:
            raise ValueError("condition map not calibrated")
        emb = np.stack([provider.embed(int(c)).vector for c in labels]).astype(np.float64)
        return emb @ self.w_cond

    def label_features(self, num_labels: int, provider: LabelTableProvider) -> np.ndarray:
        return self.cond_features(range(num_labels), provider)

    def identity(self) -> tuple[str, int]:
        return (self.extractor_id, self.seed)


@dataclass
class FeatureSet:
    motion: np.ndarray        # (n, d_feat)
    text: np.ndarray | None   # (n, d_feat) aligned rows, or None
    extractor_id: str
    seed: int
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.text is not None and len(self.text) != len(self.motion):
            raise ValueError("motion/text rows must align")


def build_feature_set(extractor: FeatureExtractor, grids: list[MotionGrid],
                      provider: LabelTableProvider | None = None) -> FeatureSet:
    labels = np.array([-1 if g.label is None else g.label for g in grids])
    text = None
    if provider is not None:
        if (labels < 0).any():
            raise ValueError("all clips need labels to build condition features")
        text = extractor.cond_features(labels, provider)
    return FeatureSet(extractor.motion_features(grids), text,
                      extractor.extractor_id, extractor.seed, labels)


def check_comparable(a: FeatureSet, b: FeatureSet):
    if (a.extractor_id, a.seed) != (b.extractor_id, b.seed):
        raise ValueError(
            f"feature sets from different extractors: {a.extractor_id}/{a.seed} "
            f"vs {b.extractor_id}/{b.seed}")


# ---------------------------------------------------------------------------
# metric primitives (plain float64 arrays)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -1e-6:
        warnings.warn(f"covariance eigenvalue clamped from {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(f_a: np.ndarray, f_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    The cross-covariance square root comes from the eigendecomposition of the
    symmetrized product sqrt(Ca) Cb sqrt(Ca), negative eigenvalues clamped.
    """
    f_a = np.asarray(f_a, dtype=np.float64)
    f_b = np.asarray(f_b, dtype=np.float64)
    if len(f_a) < 2 or len(f_b) < 2:
        raise ValueError("need at least 2 samples per side")
    mu_a, mu_b = f_a.mean(axis=0), f_b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(f_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(f_b, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if vals.min() < -1e-6:
        warnings.warn(f"product eigenvalue clamped from {vals.min():.3e}")
    trace_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)


def r_precision(f_motion: np.ndarray, f_text: np.ndarray, rng: np.random.Generator,
                pool_size: int = 32) -> tuple[float, float, float]:
    """Retrieval accuracy of the true description among pool_size candidates.

    Candidate i's pool is its own text feature plus pool_size-1 mismatched rows
    sampled without replacement.
    """
    n = len(f_motion)
    if len(f_text) != n:
        raise ValueError("paired features required")
    if n < pool_size:
        raise ValueError(f"need at least {pool_size} candidates, have {n}")
    hits = np.zeros(3)
    for i in range(n):
        others = rng.permutation(n - 1)[: pool_size - 1]
        others = others + (others >= i)
        d_true = np.linalg.norm(f_motion[i] - f_text[i])
        d_others = np.linalg.norm(f_text[others] - f_motion[i], axis=1)
        rank = int((d_others < d_true).sum())
        for k in range(3):
            hits[k] += rank <= k
    top1, top2, top3 = hits / n
    return float(top1), float(top2), float(top3)


def label_r_precision(f_motion: np.ndarray, labels: np.ndarray,
                      label_feats: np.ndarray) -> tuple[float, float, float]:
    """Rank of each motion's own label feature among all label features."""
    K = len(label_feats)
    d = np.linalg.norm(f_motion[:, None, :] - label_feats[None, :, :], axis=2)
    rank = (d < d[np.arange(len(f_motion)), labels][:, None]).sum(axis=1)
    return tuple(float((rank <= k).mean()) for k in range(3))


def mm_dist(f_motion: np.ndarray, f_text: np.ndarray) -> float:
    """Mean Euclidean distance between aligned motion/condition feature rows."""
    if len(f_motion) != len(f_text):
        raise ValueError("paired features required")
    return float(np.linalg.norm(np.asarray(f_motion) - np.asarray(f_text), axis=1).mean())


def diversity(f: np.ndarray, rng: np.random.Generator, n_pairs: int = 300) -> float:
    """Mean distance over n_pairs uniformly sampled pairs of distinct rows."""
    n = len(f)
    if n < 2:
        raise ValueError("need at least 2 features")
    i = rng.integers(0, n, size=n_pairs)
    j = rng.integers(0, n - 1, size=n_pairs)
    j = j + (j >= i)
    return float(np.linalg.norm(f[i] - f[j], axis=1).mean())


def label_conditional_fid(f_a: np.ndarray, labels_a: np.ndarray,
                          f_b: np.ndarray, labels_b: np.ndarray) -> float:
    """Mean per-label FID; penalizes motions that sit in the wrong class region."""
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    values = []
    for c in np.unique(labels_b):
        take_a = f_a[labels_a == c]
        take_b = f_b[labels_b == c]
        if len(take_a) >= 2 and len(take_b) >= 2:
            values.append(fid(take_a, take_b))
    if not values:
        raise ValueError("no label shared by both sets has >= 2 samples")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# repeat/CI reporting


@dataclass
class EvalReport:
    repeats: int
    seed: int
    metrics: dict[str, dict] = field(default_factory=dict)

    def add(self, name: str, values: list[float]):
        if len(values) < 2:
            raise ValueError("confidence interval needs >= 2 repeats")
        arr = np.asarray(values, dtype=np.float64)
        ci = 1.96 * arr.std(ddof=1) / np.sqrt(len(arr))
        self.metrics[name] = {"mean": float(arr.mean()), "ci95": float(ci),
                              "values": [float(v) for v in arr]}

    def to_json(self) -> str:
        return json.dumps({"repeats": self.repeats, "seed": self.seed,
                           "metrics": self.metrics}, indent=2)

    def to_csv(self) -> str:
        lines = ["metric,mean,ci95"]
        for name, stat in self.metrics.items():
            lines.append(f"{name},{stat['mean']:.6f},{stat['ci95']:.6f}")
        return "\n".join(lines) + "\n"

    def to_svg(self, width: int = 480, height: int = 240) -> str:
        """Minimal bar chart of metric means."""
        names = list(self.metrics)
        if not names:
            return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>'
        means = [self.metrics[n]["mean"] for n in names]
        top = max(max(means), 1e-9)
        bar_w = width / len(names)
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
        for i, (name, value) in enumerate(zip(names, means)):
            h = (height - 40) * value / top
            x = i * bar_w + 4
            parts.append(f'<rect x="{x:.1f}" y="{height - 20 - h:.1f}" '
                         f'width="{bar_w - 8:.1f}" height="{h:.1f}" fill="#4477aa"/>')
            parts.append(f'<text x="{x:.1f}" y="{height - 6}" font-size="9">{name}</text>')
            parts.append(f'<text x="{x:.1f}" y="{height - 24 - h:.1f}" font-size="9">'
                         f"{value:.3f}</text>")
        parts.append("</svg>")
        return "".join(parts)


def evaluate(gen: FeatureSet, ref: FeatureSet, repeats: int = 20, seed: int = 0,
             diversity_pairs: int = 300, rprec_pool: int = 32) -> EvalReport:
    """Run the metric suite `repeats` times with per-repeat rng streams.

    FID and MM-Dist are deterministic in the features; R-precision and
    Diversity vary through their candidate/pair sampling.
    """
    check_comparable(gen, ref)
    report = EvalReport(repeats=repeats, seed=seed)
    fid_value = fid(gen.motion, ref.motion)

    def one_repeat(r: int) -> dict:
        rng = make_rng(seed, "eval-repeat", r)
        out = {"fid": fid_value,
               "diversity": diversity(gen.motion, rng, diversity_pairs)}
        if gen.text is not None:
            out["mm_dist"] = mm_dist(gen.motion, gen.text)
            if len(gen.motion) >= rprec_pool:
                top1, top2, top3 = r_precision(gen.motion, gen.text, rng, rprec_pool)
                out.update({"r_top1": top1, "r_top2": top2, "r_top3": top3})
        return out

    rows = worker_map(one_repeat, range(repeats))
    for name in rows[0]:
        report.add(name, [row[name] for row in rows])
    return report

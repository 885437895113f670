"""Shared test oracles: central finite differences and gradient comparison."""

import numpy as np

from stme.tensor import Tensor


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x (x is mutated in place and
    restored between probes)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_grads(build, arrays, rng, rtol=1e-5, h=1e-5, wrt=None):
    """Compare autodiff grads of build(*tensors) against finite differences.

    arrays: float64 inputs. The output is projected to a scalar with a fixed
    random weighting so the whole Jacobian gets exercised. `wrt` limits the
    check to a subset of input positions.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    weights = rng.standard_normal(out.shape) if out.size > 1 else None

    def scalarize(node):
        if weights is None:
            return node
        return (node * Tensor(weights)).sum()

    scalarize(out).backward()
    positions = range(len(arrays)) if wrt is None else wrt
    for k in positions:
        def f(x, k=k):
            probe = [Tensor(a) for a in arrays]
            probe[k] = Tensor(x.copy())
            return scalarize(build(*probe)).item()

        fd = fd_grad(f, arrays[k].copy(), h=h)
        ad = tensors[k].grad
        assert ad is not None, f"no gradient for input {k}"
        denom = np.maximum(1.0, np.maximum(np.abs(ad), np.abs(fd)))
        err = np.abs(ad - fd) / denom
        assert err.max() < rtol, f"input {k}: max rel err {err.max():.3e}"


def away_from_kinks(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Push values out of the +/-margin band around 0 (relu/abs FD safety)."""
    x = x.copy()
    small = np.abs(x) < margin
    x[small] = np.where(x[small] >= 0, x[small] + margin, x[small] - margin)
    return x

"""Shared test oracles: finite differences, naive convolution, loop losses."""

from __future__ import annotations

import numpy as np

from dkd.tensor import Tensor, backward


def fd_gradcheck(fn, tensors, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Check tape gradients of scalar fn() against central finite differences.

    Returns the worst norm-relative error over the given tensors; asserts it
    is below tol. fn must be a deterministic closure over `tensors` and must
    rebuild the graph on every call.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "gradient not populated"
        g = t.grad.copy()
        fd = np.zeros_like(t.data)
        flat = t.data.ravel()
        fdflat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            fdflat[i] = (fp - fm) / (2.0 * h)
        denom = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
        rel = np.linalg.norm(g - fd) / denom
        worst = max(worst, rel)
        assert rel < tol, f"gradient mismatch: rel err {rel:.3e} >= {tol:.1e}"
    return worst


def fd_spotcheck(fn, tensors, entries_per_tensor: int = 8, h: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> float:
    """Central-difference check on a random subset of entries per tensor.

    Same per-entry scheme as fd_gradcheck (so relu kinks are never crossed
    by a compound displacement), but only a sample of coordinates, which
    keeps large composites affordable. Error is norm-relative over the
    sampled coordinates."""
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "gradient not populated"
        flat = t.data.ravel()
        gflat = t.grad.ravel()
        n = min(entries_per_tensor, flat.size)
        idxs = rng.choice(flat.size, size=n, replace=False)
        g_s = np.empty(n)
        fd_s = np.empty(n)
        for j, i in enumerate(idxs):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            fd_s[j] = (fp - fm) / (2.0 * h)
            g_s[j] = gflat[i]
        denom = max(np.linalg.norm(g_s), np.linalg.norm(fd_s), 1e-10)
        rel = np.linalg.norm(g_s - fd_s) / denom
        worst = max(worst, rel)
        assert rel < tol, f"gradient spot-check mismatch: rel err {rel:.3e} >= {tol:.1e}"
    return worst


def conv2d_naive(x: np.ndarray, w: np.ndarray, b, stride: int, padding: int, groups: int) -> np.ndarray:
    """Direct-summation convolution oracle, quadruple loop, no tricks."""
    cin, h, wd = x.shape
    cout, cper, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.zeros((cin, h + 2 * padding, wd + 2 * padding))
    xp[:, padding : padding + h, padding : padding + wd] = x
    out = np.zeros((cout, ho, wo))
    cg_out = cout // groups
    for co in range(cout):
        gi = co // cg_out
        for y in range(ho):
            for xx in range(wo):
                acc = 0.0
                for ci in range(cper):
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += (
                                w[co, ci, ki, kj]
                                * xp[gi * cper + ci, y * stride + ki, xx * stride + kj]
                            )
                out[co, y, xx] = acc
    if b is not None:
        out += np.asarray(b)[:, None, None]
    return out


def make_param(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, size=shape), requires_grad=True)

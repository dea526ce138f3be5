"""Dense-array substrate: neighborhoods, unfolding, normalization, softmax.

Feature maps are plain ``numpy`` arrays laid out as ``[B, T, H, W, C]``.
Unfolded contexts are ``[B, N, M, C]`` with ``N = T*H*W`` and neighbor
offsets enumerated row-major over ``(dt, dh, dw)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

L2_EPS = 1e-12


@dataclass(frozen=True)
class NeighborhoodSpec:
    m_t: int
    m_h: int
    m_w: int
    padding: str = "zero"

    def __post_init__(self):
        for name in ("m_t", "m_h", "m_w"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1 or v % 2 == 0:
                raise ValueError(f"{name} must be an odd positive integer, got {v!r}")
        if self.padding != "zero":
            raise ValueError(f"unsupported padding {self.padding!r}")

    @property
    def M(self) -> int:
        return self.m_t * self.m_h * self.m_w

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.m_t, self.m_h, self.m_w)

    @property
    def center(self) -> int:
        return (self.M - 1) // 2

    def offsets(self) -> np.ndarray:
        """``[M, 3]`` integer offsets ``(dt, dh, dw)``, dt slowest."""
        rt, rh, rw = self.m_t // 2, self.m_h // 2, self.m_w // 2
        grid = np.mgrid[-rt:rt + 1, -rh:rh + 1, -rw:rw + 1]
        return grid.reshape(3, -1).T

    @classmethod
    def parse(cls, text: str) -> "NeighborhoodSpec":
        """Parse ``"5x7x7"``."""
        parts = text.lower().split("x")
        if len(parts) != 3:
            raise ValueError(f"window must look like 3x3x3, got {text!r}")
        return cls(*(int(p) for p in parts))

    def __str__(self):
        return f"{self.m_t}x{self.m_h}x{self.m_w}"


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based Philox stream; identical ``(seed, *keys)`` give an identical stream."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def check_feature_map(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 5:
        raise ValueError(f"feature map must be [B,T,H,W,C], got shape {x.shape}")
    if min(x.shape) < 1:
        raise ValueError(f"feature map dims must be >= 1, got {x.shape}")
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"feature map dtype must be float32/float64, got {x.dtype}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature map contains non-finite values")
    return x


def _check_window(shape, spec: NeighborhoodSpec):
    for size, m, name in zip(shape, spec.shape, "THW"):
        if m > 2 * size + 1:
            raise ValueError(f"window {spec} too large for grid {name}={size}")


def pad_grid(x: np.ndarray, spec: NeighborhoodSpec) -> np.ndarray:
    """Zero-pad the T, H, W axes of ``x`` by the window half-widths."""
    _check_window(x.shape[1:4], spec)
    rt, rh, rw = spec.m_t // 2, spec.m_h // 2, spec.m_w // 2
    return np.pad(x, ((0, 0), (rt, rt), (rh, rh), (rw, rw), (0, 0)))


def shifted_views(padded: np.ndarray, spec: NeighborhoodSpec, grid: tuple[int, int, int]):
    """Yield ``[B,T,H,W,C]`` views of a padded map, one per neighbor offset.

    View ``m`` holds, at every position, that position's ``m``-th neighbor.
    No copies are made.
    """
    T, H, W = grid
    for dt in range(spec.m_t):
        for dh in range(spec.m_h):
            for dw in range(spec.m_w):
                yield padded[:, dt:dt + T, dh:dh + H, dw:dw + W, :]


def unfold_padded(padded: np.ndarray, spec: NeighborhoodSpec, grid: tuple[int, int, int]) -> np.ndarray:
    """Unfold an already padded map into ``[B,T,H,W,M,C]``."""
    B, C = padded.shape[0], padded.shape[-1]
    T, H, W = grid
    out = np.empty((B, T, H, W, spec.M, C), dtype=padded.dtype)
    for m, view in enumerate(shifted_views(padded, spec, grid)):
        out[:, :, :, :, m, :] = view
    return out


def unfold(x: np.ndarray, spec: NeighborhoodSpec) -> np.ndarray:
    """Extract every local window: ``[B,T,H,W,C] -> [B,N,M,C]``."""
    x = np.asarray(x)
    if x.ndim != 5:
        raise ValueError(f"feature map must be [B,T,H,W,C], got shape {x.shape}")
    B, T, H, W, C = x.shape
    out = unfold_padded(pad_grid(x, spec), spec, (T, H, W))
    return out.reshape(B, T * H * W, spec.M, C)


def block_plan(B: int, grid: tuple[int, int, int], M: int, C: int, max_elems: int):
    """Split ``(batch, frame)`` into blocks whose unfolding holds at most ~``max_elems``.

    Returns ``(batch_slice, frame_slice)`` pairs; a single frame is the
    smallest block, so tiny budgets still make progress.
    """
    T, H, W = grid
    frames = max(1, max_elems // (H * W * M * C))
    if frames >= T:
        nb = frames // T
        return [(slice(b, min(b + nb, B)), slice(0, T)) for b in range(0, B, nb)]
    return [(slice(b, b + 1), slice(t, min(t + frames, T))) for b in range(B) for t in range(0, T, frames)]


def unfold_blocks(padded: np.ndarray, spec: NeighborhoodSpec, grid: tuple[int, int, int], max_elems: int):
    """Yield ``(batch_slice, frame_slice, block)`` with ``block`` shaped ``[b,t,H,W,M,C]``."""
    _, H, W = grid
    for bs, ts in block_plan(padded.shape[0], grid, spec.M, padded.shape[-1], max_elems):
        sub = padded[bs, ts.start:ts.stop + spec.m_t - 1]
        yield bs, ts, unfold_padded(sub, spec, (ts.stop - ts.start, H, W))


def fold(ctx: np.ndarray, spec: NeighborhoodSpec, grid: tuple[int, int, int]) -> np.ndarray:
    """Adjoint of :func:`unfold`: scatter-add ``[B,N,M,C]`` back onto the grid."""
    B, N, M, C = ctx.shape
    T, H, W = grid
    if N != T * H * W or M != spec.M:
        raise ValueError(f"context shape {ctx.shape} does not match grid {grid} / window {spec}")
    ctx = ctx.reshape(B, T, H, W, M, C)
    _check_window(grid, spec)
    rt, rh, rw = spec.m_t // 2, spec.m_h // 2, spec.m_w // 2
    padded = np.zeros((B, T + 2 * rt, H + 2 * rh, W + 2 * rw, C), dtype=ctx.dtype)
    for m, view in enumerate(shifted_views(padded, spec, (T, H, W))):
        view += ctx[:, :, :, :, m, :]
    return padded[:, rt:rt + T, rh:rh + H, rw:rw + W, :]


def l2_normalize_rows(a: np.ndarray, eps: float = L2_EPS) -> np.ndarray:
    """Scale each last-axis row by ``1 / max(||row||, eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    a = np.asarray(a)
    norm = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    return a / np.maximum(norm, eps)


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v)
    z = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def contract(subscripts: str, *operands: np.ndarray) -> np.ndarray:
    """Einstein summation with a fixed contraction path.

    The path is chosen greedily from shapes alone, so identical inputs give
    bitwise-identical results on a given build.
    """
    try:
        return np.einsum(subscripts, *operands, optimize="greedy")
    except ValueError as exc:
        shapes = ", ".join(str(np.shape(o)) for o in operands)
        raise ValueError(f"contract {subscripts!r} failed for shapes {shapes}: {exc}") from None

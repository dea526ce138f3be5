"""Comparison transforms: convolution, self-attention, involution, lambda convolution.

Every transform has a context-level form operating on a target ``[..., C]``
and its context ``[..., M, C]``, and a map-level form that unfolds a
``[B,T,H,W,C]`` feature map first. Embeddings carry no bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorgrid import (NeighborhoodSpec, check_feature_map, contract, l2_normalize_rows, pad_grid, shifted_views,
                         softmax, unfold)


@dataclass
class ConvParams:
    W: np.ndarray  # [M*C_in, C_out]


@dataclass
class SaParams:
    E_Q: np.ndarray
    E_K: np.ndarray
    E_V: np.ndarray
    P: np.ndarray  # [M, C]
    use_content: bool = True
    use_position: bool = False
    use_softmax: bool = True
    normalize: bool = False

    def __post_init__(self):
        if not (self.use_content or self.use_position):
            raise ValueError("self-attention needs use_content or use_position")
        C = self.E_Q.shape[0]
        for name in ("E_Q", "E_K", "E_V"):
            if getattr(self, name).shape != (C, C):
                raise ValueError(f"{name} must be [{C},{C}], got {getattr(self, name).shape}")
        if self.P.ndim != 2 or self.P.shape[1] != C:
            raise ValueError(f"P must be [M,{C}], got {self.P.shape}")

    @property
    def flags(self) -> dict:
        return {
            "use_content": self.use_content,
            "use_position": self.use_position,
            "use_softmax": self.use_softmax,
            "normalize": self.normalize,
        }


@dataclass
class InvolutionParams:
    P: np.ndarray  # [M, C]


@dataclass
class LambdaParams:
    E_Q: np.ndarray
    E_V: np.ndarray
    P: np.ndarray  # [M, C]


def _target(x: np.ndarray) -> np.ndarray:
    B, T, H, W, C = x.shape
    return x.reshape(B, T * H * W, C)


def _check_M(P: np.ndarray, spec: NeighborhoodSpec, C: int):
    if P.shape != (spec.M, C):
        raise ValueError(f"P must be [{spec.M},{C}], got {P.shape}")


# -- convolution ----------------------------------------------------------

def convolution_context(ctx: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``y = W^T vec(X_n)`` with vec ordering m-major, channel-minor."""
    *lead, M, C = ctx.shape
    if W.shape[0] != M * C:
        raise ValueError(f"W has {W.shape[0]} rows, context needs {M * C}")
    return ctx.reshape(*lead, M * C) @ W


def convolution(x: np.ndarray, spec: NeighborhoodSpec, p: ConvParams) -> np.ndarray:
    x = check_feature_map(x)
    B, T, H, W, C = x.shape
    y = convolution_context(unfold(x, spec), p.W)
    return y.reshape(B, T, H, W, -1)


# -- self-attention -------------------------------------------------------

def attention_kernel(q: np.ndarray, K: np.ndarray, P: np.ndarray | None, p: SaParams) -> np.ndarray:
    """Attention weights over the context, ``[..., M]``.

    ``q`` and ``K`` are already embedded (and normalized if requested).
    """
    logits = 0.0
    if p.use_content:
        logits = logits + contract("...c,...mc->...m", q, K)
    if p.use_position:
        logits = logits + q @ P.T
    if p.use_softmax:
        return softmax(logits)
    return logits


def sa_embed(target: np.ndarray, ctx: np.ndarray, p: SaParams):
    q = target @ p.E_Q
    K = ctx @ p.E_K
    V = ctx @ p.E_V
    if p.normalize:
        q, K, V = l2_normalize_rows(q), l2_normalize_rows(K), l2_normalize_rows(V)
    return q, K, V


def self_attention_context(target: np.ndarray, ctx: np.ndarray, p: SaParams) -> np.ndarray:
    q, K, V = sa_embed(target, ctx, p)
    kernel = attention_kernel(q, K, p.P, p)
    return contract("...m,...mc->...c", kernel, V)


def self_attention(x: np.ndarray, spec: NeighborhoodSpec, p: SaParams) -> np.ndarray:
    x = check_feature_map(x)
    _check_M(p.P, spec, x.shape[-1])
    B, T, H, W, C = x.shape
    # row-wise embedding and normalization commute with unfolding (padding rows stay zero),
    # so embed once per grid position and read contexts through shifted views of the padded maps
    q, k, v = x @ p.E_Q, x @ p.E_K, x @ p.E_V
    if p.normalize:
        q, k, v = l2_normalize_rows(q), l2_normalize_rows(k), l2_normalize_rows(v)
    grid = (T, H, W)
    logits = np.zeros((B, T, H, W, spec.M), dtype=np.result_type(q, k))
    if p.use_content:
        for m, km in enumerate(shifted_views(pad_grid(k, spec), spec, grid)):
            logits[..., m] = np.einsum("bthwc,bthwc->bthw", q, km)
    if p.use_position:
        logits += q @ p.P.T
    kernel = softmax(logits) if p.use_softmax else logits
    y = np.zeros_like(v, dtype=np.result_type(kernel, v))
    for m, vm in enumerate(shifted_views(pad_grid(v, spec), spec, grid)):
        y += kernel[..., m:m + 1] * vm
    return y


# -- involution / lambda --------------------------------------------------

def involution_context(target: np.ndarray, ctx: np.ndarray, P: np.ndarray) -> np.ndarray:
    """``y_n = x_n P^T X_n``."""
    kernel = target @ P.T
    return contract("...m,...mc->...c", kernel, ctx)


def involution(x: np.ndarray, spec: NeighborhoodSpec, p: InvolutionParams) -> np.ndarray:
    x = check_feature_map(x)
    _check_M(p.P, spec, x.shape[-1])
    return involution_context(_target(x), unfold(x, spec), p.P).reshape(x.shape)


def lambda_context(target: np.ndarray, ctx: np.ndarray, p: LambdaParams) -> np.ndarray:
    """``y_n = x_n^Q (P^T X_n^V)``: the context is first abstracted to a C x C lambda."""
    q = target @ p.E_Q
    V = ctx @ p.E_V
    lam = contract("mc,...md->...cd", p.P, V)
    return contract("...c,...cd->...d", q, lam)


def lambda_conv(x: np.ndarray, spec: NeighborhoodSpec, p: LambdaParams) -> np.ndarray:
    x = check_feature_map(x)
    C = x.shape[-1]
    _check_M(p.P, spec, C)
    if p.E_Q.shape != (C, C) or p.E_V.shape != (C, C):
        raise ValueError("lambda embeddings must be [C,C]")
    return lambda_context(_target(x), unfold(x, spec), p).reshape(x.shape)

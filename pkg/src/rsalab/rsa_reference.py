"""Literal relational self-attention forward pass.

Per target position and sub-query ``l``::

    y = (kv + kr) (V + XR)

with basic kernel ``kv = q P^T``, relational kernel
``kr = vec(corr(q, K)) H``, relational context ``XR = (V V^T) G_ctx``.
``H = H1 H2^T`` and ``P = H2 P1`` are multiplied out here; the factorized
evaluation lives in :mod:`rsalab.rsa_efficient`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorgrid import NeighborhoodSpec, check_feature_map, contract, l2_normalize_rows, unfold


@dataclass
class RsaParams:
    E_Q: np.ndarray    # [C, C]
    E_K: np.ndarray    # [C, C_Q]
    E_V: np.ndarray    # [C, C_Q]
    P1: np.ndarray     # [D, C_Q]
    H1: np.ndarray     # [M*G_corr, D]
    H2: np.ndarray     # [M, D]
    G_ctx: np.ndarray  # [M, C_Q]
    L: int = 1
    G_corr: int = 1
    normalize: bool = True

    NAMES = ("E_Q", "E_K", "E_V", "P1", "H1", "H2", "G_ctx")

    def __post_init__(self):
        C = self.E_Q.shape[0]
        if self.L < 1 or C % self.L:
            raise ValueError(f"number of queries L={self.L} must divide C={C}")
        CQ = C // self.L
        if self.G_corr < 1 or CQ % self.G_corr:
            raise ValueError(f"G_corr={self.G_corr} must divide C_Q={CQ}")
        M, D = self.H2.shape
        expected = {
            "E_Q": (C, C),
            "E_K": (C, CQ),
            "E_V": (C, CQ),
            "P1": (D, CQ),
            "H1": (M * self.G_corr, D),
            "H2": (M, D),
            "G_ctx": (M, CQ),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} must have shape {shape}, got {got}")

    @property
    def C(self) -> int:
        return self.E_Q.shape[0]

    @property
    def CQ(self) -> int:
        return self.C // self.L

    @property
    def M(self) -> int:
        return self.H2.shape[0]

    @property
    def D(self) -> int:
        return self.H2.shape[1]

    @property
    def H(self) -> np.ndarray:
        """Kernel projection ``H1 H2^T``, ``[M*G_corr, M]``."""
        return self.H1 @ self.H2.T

    @property
    def P(self) -> np.ndarray:
        """Position embedding ``H2 P1``, ``[M, C_Q]``."""
        return self.H2 @ self.P1

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.NAMES}

    def replace(self, **arrays) -> "RsaParams":
        kw = self.arrays()
        kw.update(arrays)
        return RsaParams(**kw, L=self.L, G_corr=self.G_corr, normalize=self.normalize)

    def astype(self, dtype) -> "RsaParams":
        return self.replace(**{k: v.astype(dtype) for k, v in self.arrays().items()})


def init_rsa_params(C: int, M: int, L: int = 1, D: int | None = None, G_corr: int | None = None,
                    normalize: bool = True, rng: np.random.Generator | None = None,
                    dtype=np.float64) -> RsaParams:
    """Random parameters: He-normal embeddings, uniform(+-1/sqrt(fan_in)) elsewhere.

    ``D`` defaults to ``C_Q`` and ``G_corr`` to ``C_Q`` (Hadamard correlation).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if C % L:
        raise ValueError(f"L={L} must divide C={C}")
    CQ = C // L
    D = CQ if D is None else D
    G_corr = CQ if G_corr is None else G_corr

    def he(shape):
        return rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)

    def unif(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    p = RsaParams(
        E_Q=he((C, C)),
        E_K=he((C, CQ)),
        E_V=he((C, CQ)),
        P1=unif((D, CQ), CQ),
        H1=unif((M * G_corr, D), M * G_corr),
        H2=unif((M, D), D),
        G_ctx=unif((M, CQ), M),
        L=L,
        G_corr=G_corr,
        normalize=normalize,
    )
    return p.astype(dtype)


def _check(x: np.ndarray, spec: NeighborhoodSpec, p: RsaParams):
    x = check_feature_map(x)
    if x.shape[-1] != p.C:
        raise ValueError(f"feature map has C={x.shape[-1]}, params expect C={p.C}")
    if spec.M != p.M:
        raise ValueError(f"window {spec} has M={spec.M}, params expect M={p.M}")
    return x


def split_queries(x: np.ndarray, p: RsaParams) -> np.ndarray:
    """``[B,T,H,W,C] -> [B,N,L,C_Q]`` raw (unnormalized) sub-queries."""
    B, T, H, W, C = x.shape
    return (x.reshape(B, T * H * W, C) @ p.E_Q).reshape(B, T * H * W, p.L, p.CQ)


def embed(x: np.ndarray, spec: NeighborhoodSpec, p: RsaParams):
    """Queries ``[B,N,L,C_Q]``, keys and values ``[B,N,M,C_Q]``.

    Keys/values embed the unfolded context and are shared by all sub-queries.
    """
    x = _check(x, spec, p)
    q = split_queries(x, p)
    ctx = unfold(x, spec)
    K = ctx @ p.E_K
    V = ctx @ p.E_V
    if p.normalize:
        q, K, V = l2_normalize_rows(q), l2_normalize_rows(K), l2_normalize_rows(V)
    return q, K, V


def basic_kernel(q: np.ndarray, p: RsaParams) -> np.ndarray:
    """``q P^T`` with ``P = H2 P1``; ``q`` is ``[..., C_Q]``, result ``[..., M]``."""
    return q @ p.P.T


def correlation(q: np.ndarray, K: np.ndarray, groups: int) -> np.ndarray:
    """Group-wise query/key correlation, ``[..., M, groups]``.

    Channels are split into contiguous blocks; ``groups=1`` is the dot
    product and ``groups=C_Q`` the Hadamard product.
    """
    CQ = q.shape[-1]
    if CQ % groups:
        raise ValueError(f"groups={groups} must divide C_Q={CQ}")
    S = CQ // groups
    qg = q.reshape(*q.shape[:-1], groups, S)
    Kg = K.reshape(*K.shape[:-1], groups, S)
    return contract("...gs,...mgs->...mg", qg, Kg)


def relational_kernel(q: np.ndarray, K: np.ndarray, p: RsaParams) -> np.ndarray:
    """``vec(corr(q, K)) H`` with vec ordering m-major, group-minor."""
    if p.H1.shape[0] != K.shape[-2] * p.G_corr:
        raise ValueError(f"H1 has {p.H1.shape[0]} rows, expected M*G_corr={K.shape[-2] * p.G_corr}")
    corr = correlation(q, K, p.G_corr)
    flat = corr.reshape(*corr.shape[:-2], -1)
    return flat @ p.H


def relational_context(V: np.ndarray, p: RsaParams) -> np.ndarray:
    """``(V V^T) G_ctx``; ``V`` is ``[..., M, C_Q]``."""
    if V.shape[-2:] != p.G_ctx.shape:
        raise ValueError(f"value context {V.shape[-2:]} does not match G_ctx {p.G_ctx.shape}")
    gram = V @ np.swapaxes(V, -1, -2)
    return gram @ p.G_ctx


def _kernels_and_contexts(x, spec, p):
    q, K, V = embed(x, spec, p)
    kv = basic_kernel(q, p)                           # [B,N,L,M]
    kr = relational_kernel(q, K[:, :, None], p)       # [B,N,L,M]
    XR = relational_context(V, p)                     # [B,N,M,CQ]
    return kv, kr, V, XR


def _to_map(y: np.ndarray, shape) -> np.ndarray:
    return y.reshape(shape)


def rsa_forward_reference(x: np.ndarray, spec: NeighborhoodSpec, p: RsaParams) -> np.ndarray:
    """RSA output ``[B,T,H,W,C]``; sub-query outputs concatenated in order."""
    kv, kr, V, XR = _kernels_and_contexts(x, spec, p)
    y = contract("bnlm,bnmc->bnlc", kv + kr, V + XR)
    return _to_map(y, x.shape)


def rsa_subtransforms(x: np.ndarray, spec: NeighborhoodSpec, p: RsaParams):
    """The four dynamic transforms ``(kv V, kr V, kv XR, kr XR)`` as separate maps."""
    kv, kr, V, XR = _kernels_and_contexts(x, spec, p)
    return tuple(
        _to_map(contract("bnlm,bnmc->bnlc", k, c), x.shape)
        for k, c in ((kv, V), (kr, V), (kv, XR), (kr, XR))
    )

"""Factorized, order-switched RSA.

Per sub-query the output is evaluated as::

    y = q (P1^T + K (*) r(H1)) (H2^T V) (I + V^T G_ctx)

where ``(K (*) r(H1))[c, d] = sum_m K[m, c] r(H1)[m, group(c), d]``. The
three context reductions are channel-wise convolutions; the map-level path
evaluates them as GEMMs over bounded blocks of unfolded keys/values, so the
per-position state is ``C_Q*D + C_Q**2`` and never ``M*C_Q``.
"""
from __future__ import annotations

import numpy as np

from .rsa_reference import RsaParams, _check, split_queries
from .tensorgrid import NeighborhoodSpec, contract, l2_normalize_rows, pad_grid, unfold_blocks

# element budget for one block of unfolded keys (and one of values)
BLOCK_ELEMS = 1 << 21


def reshape_h1(H1: np.ndarray, M: int, groups: int) -> np.ndarray:
    """``[M*G, D] -> [M, G, D]`` (m-major, a pure reshape)."""
    return H1.reshape(M, groups, H1.shape[-1])


def unreshape_h1(rH1: np.ndarray) -> np.ndarray:
    M, G, D = rH1.shape
    return rH1.reshape(M * G, D)


def channel_h1(p: RsaParams) -> np.ndarray:
    """r(H1) broadcast from groups to channels, ``[M, C_Q, D]``."""
    rH1 = reshape_h1(p.H1, p.M, p.G_corr)
    return np.repeat(rH1, p.CQ // p.G_corr, axis=1)


def key_h1(K: np.ndarray, p: RsaParams) -> np.ndarray:
    """``K (*) r(H1)`` for explicit contexts ``[..., M, C_Q] -> [..., C_Q, D]``."""
    return contract("...mc,mcd->...cd", K, channel_h1(p))


def kernel_fast(q: np.ndarray, K: np.ndarray, p: RsaParams) -> np.ndarray:
    """Relational kernel via the switched order: ``(q (K (*) r(H1))) H2^T``."""
    if K.shape[-2:] != (p.M, p.CQ) or q.shape[-1] != p.CQ:
        raise ValueError(f"expected q [...,{p.CQ}] and K [...,{p.M},{p.CQ}], got {q.shape} and {K.shape}")
    qk = contract("...c,...cd->...d", q, key_h1(K, p))
    return qk @ p.H2.T


def _embed_maps(x: np.ndarray, p: RsaParams):
    """Per-position embeddings; keys/values stay on the grid, unfolded lazily."""
    q = split_queries(x, p)
    k = x @ p.E_K
    v = x @ p.E_V
    if p.normalize:
        q, k, v = l2_normalize_rows(q), l2_normalize_rows(k), l2_normalize_rows(v)
    return q, k, v


def context_factors(x: np.ndarray, spec: NeighborhoodSpec, p: RsaParams, block_elems: int = BLOCK_ELEMS):
    """Per-position ``(q, A, HV, VG)``.

    ``A = P1^T + K (*) r(H1)`` is ``[B,N,C_Q,D]``, ``HV = H2^T V`` is
    ``[B,N,D,C_Q]`` and ``VG = I + V^T G_ctx`` is ``[B,N,C_Q,C_Q]``.
    Keys and values are unfolded one block of positions at a time (at most
    about ``block_elems`` elements each), so the unfolded working set does
    not grow with the grid.
    """
    x = _check(x, spec, p)
    B, T, H, W, _ = x.shape
    CQ, D, M = p.CQ, p.D, p.M
    q, k, v = _embed_maps(x, p)
    rH1c = channel_h1(p).transpose(1, 0, 2)  # [C_Q, M, D]
    dt = x.dtype

    A = np.empty((B, T, H, W, CQ, D), dtype=dt)
    HV = np.empty((B, T, H, W, D, CQ), dtype=dt)
    VG = np.empty((B, T, H, W, CQ, CQ), dtype=dt)
    grid = (T, H, W)
    blocks = zip(unfold_blocks(pad_grid(k, spec), spec, grid, block_elems),
                 unfold_blocks(pad_grid(v, spec), spec, grid, block_elems))
    for (bs, ts, kb), (_, _, vb) in blocks:
        shape = kb.shape[:4]
        kb = kb.reshape(-1, M, CQ)
        vb = vb.reshape(-1, M, CQ)
        n = kb.shape[0]
        # channel-wise reduction over the window: one GEMM per channel
        a = np.matmul(kb.transpose(2, 0, 1), rH1c).transpose(1, 0, 2)
        hv = (p.H2.T @ vb.transpose(1, 0, 2).reshape(M, n * CQ)).reshape(D, n, CQ).transpose(1, 0, 2)
        vg = (vb.transpose(0, 2, 1).reshape(n * CQ, M) @ p.G_ctx).reshape(n, CQ, CQ)
        A[bs, ts] = a.reshape(*shape, CQ, D)
        HV[bs, ts] = hv.reshape(*shape, D, CQ)
        VG[bs, ts] = vg.reshape(*shape, CQ, CQ)
    A += p.P1.T
    VG += np.eye(CQ, dtype=dt)
    N = T * H * W
    return (q, A.reshape(B, N, CQ, D), HV.reshape(B, N, D, CQ), VG.reshape(B, N, CQ, CQ))


def _apply(q, A, HV, VG):
    # left to right: ((q A) HV) VG
    return ((q @ A) @ HV) @ VG


def rsa_forward_fast(x: np.ndarray, spec: NeighborhoodSpec, p: RsaParams) -> np.ndarray:
    q, A, HV, VG = context_factors(x, spec, p)
    return _apply(q, A, HV, VG).reshape(x.shape)


def multi_query_forward(x: np.ndarray, spec: NeighborhoodSpec, p: RsaParams) -> np.ndarray:
    """Evaluate sub-queries one at a time against the shared key/value factors."""
    q, A, HV, VG = context_factors(x, spec, p)
    outs = [_apply(q[:, :, l:l + 1], A, HV, VG) for l in range(p.L)]
    return np.concatenate(outs, axis=2).reshape(x.shape)

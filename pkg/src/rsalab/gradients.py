"""Analytic reverse-mode gradients and a central-difference checker.

Backward passes are written against the reference computation graph. They
return plain ``dict`` gradient sets keyed by parameter name, plus ``"x"``
for the input map. Each gradient is ``d<upstream, y>/d theta``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .baselines import SaParams
from .rsa_reference import RsaParams, _check
from .tensorgrid import L2_EPS, NeighborhoodSpec, fold, make_rng, softmax, unfold


def _normalize(r: np.ndarray, on: bool):
    if not on:
        return r, None
    norm = np.sqrt(np.sum(r * r, axis=-1, keepdims=True))
    return r / np.maximum(norm, L2_EPS), norm


def _normalize_bwd(gy: np.ndarray, y: np.ndarray, norm: np.ndarray | None) -> np.ndarray:
    if norm is None:
        return gy
    proj = gy - y * np.sum(y * gy, axis=-1, keepdims=True)
    return np.where(norm > L2_EPS, proj / np.maximum(norm, L2_EPS), gy / L2_EPS)


def l2_normalize_backward(r: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of row-wise L2 normalization at ``r``."""
    y, norm = _normalize(r, True)
    return _normalize_bwd(gy, y, norm)


def _embed_maps(x, E_Q, E_K, E_V, spec, normalize, q_shape=None):
    """Embed and normalize on the grid, then unfold keys and values.

    Both steps commute with unfolding (``unfold(x) E == unfold(x E)`` and
    row normalization maps zero padding to zero), so they run once per
    position instead of once per context entry. Returns ``q, K, V`` and the
    state :func:`_embed_bwd` needs.
    """
    B, T, H, W, C = x.shape
    xt = x.reshape(B, T * H * W, C)
    qr = xt @ E_Q
    q, nq = _normalize(qr.reshape(q_shape) if q_shape else qr, normalize)
    k, nk = _normalize(x @ E_K, normalize)
    v, nv = _normalize(x @ E_V, normalize)
    return q, unfold(k, spec), unfold(v, spec), (xt, q, nq, k, nk, v, nv)


def _embed_bwd(saved, E_Q, E_K, E_V, gq, gK, gV, spec, grid):
    """Pull ``q``, ``K``, ``V`` gradients back to the embeddings and the input."""
    xt, q, nq, k, nk, v, nv = saved
    B, N, C = xt.shape
    X = xt.reshape(-1, C)
    gq = _normalize_bwd(gq, q, nq).reshape(B * N, -1)
    gk = _normalize_bwd(fold(gK, spec, grid), k, nk).reshape(B * N, -1)
    gv = _normalize_bwd(fold(gV, spec, grid), v, nv).reshape(B * N, -1)
    grads = {"E_Q": X.T @ gq, "E_K": X.T @ gk, "E_V": X.T @ gv}
    gx = gq @ E_Q.T + gk @ E_K.T + gv @ E_V.T
    return grads, gx.reshape(B, *grid, C)


def _flat_t(a: np.ndarray, cols: int) -> np.ndarray:
    return a.reshape(-1, cols).T


def _rmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``a @ w`` for a 2-D ``w`` as one GEMM over all leading axes."""
    return (a.reshape(-1, a.shape[-1]) @ w).reshape(*a.shape[:-1], w.shape[-1])


def _t(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def rsa_vjp(x: np.ndarray, spec: NeighborhoodSpec, p: RsaParams):
    """Reference forward that keeps its intermediates.

    Returns ``(y, pullback)``; ``pullback(upstream)`` gives the same dict as
    :func:`rsa_backward`. ``H = H1 H2^T`` and ``V V^T G_ctx`` are applied in
    factored order: the same function with fewer operations.
    """
    x = _check(x, spec, p)
    B, T, H, W, C = x.shape
    N, L, CQ, M, G = T * H * W, p.L, p.CQ, p.M, p.G_corr
    S, D = CQ // G, p.D

    q, K, V, saved = _embed_maps(x, p.E_Q, p.E_K, p.E_V, spec, p.normalize, (B, N, L, CQ))
    qg = q.reshape(B, N, L, 1, G, S)
    Kg = K.reshape(B, N, 1, M, G, S)
    flat = np.sum(qg * Kg, axis=-1).reshape(B, N, L, M * G)
    fH1 = _rmul(flat, p.H1)
    kap = _rmul(q, p.P.T) + _rmul(fH1, p.H2.T)
    VtG = _t(V) @ p.G_ctx
    ctxs = V + V @ VtG
    y = (kap @ ctxs).reshape(x.shape)

    def pullback(upstream: np.ndarray) -> dict:
        if upstream.shape != x.shape:
            raise ValueError(f"upstream shape {upstream.shape} != output shape {x.shape}")
        gy = upstream.reshape(B, N, L, CQ)
        gkap = gy @ _t(ctxs)
        gctxs = _t(kap) @ gy

        # relational context, ctxs = V + V (V^T G_ctx)
        VtgC = _t(V) @ gctxs
        gG_ctx = _flat_t(_t(V), M) @ VtgC.reshape(-1, CQ)
        gV = gctxs + gctxs @ _t(VtG) + _t(_rmul(VtgC, p.G_ctx.T))

        # kernels, kap = q P^T + (flat H1) H2^T
        gq = _rmul(gkap, p.P)
        gP = _flat_t(gkap, M) @ q.reshape(-1, CQ)
        gfH1 = _rmul(gkap, p.H2)
        gH1 = _flat_t(flat, M * G) @ gfH1.reshape(-1, D)
        gH2 = _flat_t(gkap, M) @ fH1.reshape(-1, D) + gP @ p.P1.T
        gcorr = _rmul(gfH1, p.H1.T).reshape(B, N, L, M, G, 1)
        gq = gq + np.sum(gcorr * Kg, axis=3).reshape(B, N, L, CQ)
        gK = np.sum(gcorr * qg, axis=2).reshape(B, N, M, CQ)

        grads, gx = _embed_bwd(saved, p.E_Q, p.E_K, p.E_V, gq, gK, gV, spec, (T, H, W))
        grads.update(P1=p.H2.T @ gP, H1=gH1, H2=gH2, G_ctx=gG_ctx, x=gx)
        return grads

    return y, pullback


def rsa_backward(x: np.ndarray, spec: NeighborhoodSpec, p: RsaParams, upstream: np.ndarray) -> dict:
    """Gradients of ``<upstream, rsa_forward_reference(x)>`` for every parameter and ``x``."""
    if np.shape(upstream) != np.shape(x):
        raise ValueError(f"upstream shape {np.shape(upstream)} != output shape {np.shape(x)}")
    return rsa_vjp(x, spec, p)[1](upstream)


def self_attention_vjp(x: np.ndarray, spec: NeighborhoodSpec, p: SaParams):
    """``(y, pullback)`` for :func:`self_attention`; see :func:`rsa_vjp`."""
    B, T, H, W, C = x.shape
    M = spec.M
    q, K, V, saved = _embed_maps(x, p.E_Q, p.E_K, p.E_V, spec, p.normalize)
    qc = q[:, :, None, :]
    logits = np.zeros(K.shape[:3], dtype=x.dtype)
    if p.use_content:
        logits += np.sum(qc * K, axis=-1)
    if p.use_position:
        logits += _rmul(q, p.P.T)
    s = softmax(logits) if p.use_softmax else logits
    y = np.sum(s[..., None] * V, axis=2).reshape(x.shape)

    def pullback(upstream: np.ndarray) -> dict:
        if upstream.shape != x.shape:
            raise ValueError(f"upstream shape {upstream.shape} != output shape {x.shape}")
        gy = upstream.reshape(B, -1, 1, C)
        gs = np.sum(gy * V, axis=-1)
        gV = s[..., None] * gy
        glog = s * (gs - np.sum(s * gs, axis=-1, keepdims=True)) if p.use_softmax else gs
        gq = np.zeros_like(q)
        gK = np.zeros_like(K)
        gP = np.zeros_like(p.P)
        if p.use_content:
            gq += np.sum(glog[..., None] * K, axis=2)
            gK = glog[..., None] * qc
        if p.use_position:
            gq += _rmul(glog, p.P)
            gP = _flat_t(glog, M) @ q.reshape(-1, C)
        grads, gx = _embed_bwd(saved, p.E_Q, p.E_K, p.E_V, gq, gK, gV, spec, (T, H, W))
        grads["P"] = gP
        grads["x"] = gx
        return grads

    return y, pullback


def self_attention_backward(x: np.ndarray, spec: NeighborhoodSpec, p: SaParams, upstream: np.ndarray) -> dict:
    """Gradients of ``<upstream, self_attention(x)>``; keys ``E_Q, E_K, E_V, P, x``."""
    return self_attention_vjp(x, spec, p)[1](upstream)


def involution_vjp(x: np.ndarray, spec: NeighborhoodSpec, P: np.ndarray):
    B, T, H, W, C = x.shape
    xt = x.reshape(B, -1, C)
    ctx = unfold(x, spec)
    kernel = _rmul(xt, P.T)
    y = np.sum(kernel[..., None] * ctx, axis=2).reshape(x.shape)

    def pullback(upstream: np.ndarray) -> dict:
        gy = upstream.reshape(B, -1, 1, C)
        gk = np.sum(gy * ctx, axis=-1)
        gx = fold(kernel[..., None] * gy, spec, (T, H, W)) + _rmul(gk, P).reshape(x.shape)
        return {"P": _flat_t(gk, spec.M) @ xt.reshape(-1, C), "x": gx}

    return y, pullback


def involution_backward(x: np.ndarray, spec: NeighborhoodSpec, P: np.ndarray, upstream: np.ndarray) -> dict:
    return involution_vjp(x, spec, P)[1](upstream)


# -- finite differences ---------------------------------------------------

@dataclass
class GradReport:
    eps: float
    max_rel: dict[str, float] = field(default_factory=dict)
    max_abs: dict[str, float] = field(default_factory=dict)
    n_coords: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst <= tol

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "worst_rel": self.worst,
            "params": {
                k: {"max_rel": self.max_rel[k], "max_abs": self.max_abs[k], "n_coords": self.n_coords[k]}
                for k in self.max_rel
            },
        }


def finite_diff_check(f: Callable[[dict], float], params: dict[str, np.ndarray],
                      analytic: dict[str, np.ndarray], eps: float = 1e-5, seed: int = 0,
                      n_coords: int = 64) -> GradReport:
    """Compare analytic gradients of scalar ``f(params)`` with central differences.

    For each array a seeded subsample of ``n_coords`` coordinates (all of
    them if fewer) is perturbed by ``+-eps``. Relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    rng = make_rng(seed)
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    report = GradReport(eps=eps)

    def evaluate():
        val = float(f(work))
        if not np.isfinite(val):
            raise FloatingPointError("forward value is not finite")
        return val

    for name in params:
        arr = work[name]
        flat = arr.reshape(-1)
        size = flat.size
        coords = np.arange(size) if size <= n_coords else np.sort(rng.choice(size, n_coords, replace=False))
        g = np.asarray(analytic[name]).reshape(-1)
        rel = absd = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            diff = abs(g[i] - num)
            absd = max(absd, diff)
            rel = max(rel, diff / max(abs(g[i]), abs(num), 1e-8))
        report.max_rel[name] = float(rel)
        report.max_abs[name] = float(absd)
        report.n_coords[name] = int(len(coords))
    return report


def rsa_gradcheck(x: np.ndarray, spec: NeighborhoodSpec, p: RsaParams, upstream: np.ndarray,
                  eps: float = 1e-5, seed: int = 0, n_coords: int = 64,
                  forward: Callable | None = None, corrupt: str | None = None) -> GradReport:
    """Check :func:`rsa_backward` against central differences of ``forward``.

    ``forward`` defaults to the reference path; passing the fast path checks
    it against the same analytic gradient. ``corrupt`` names an array whose
    largest analytic entry gets its sign flipped (a negative control); pick
    one with at most ``n_coords`` entries so the flipped entry is sampled.
    """
    from .rsa_reference import rsa_forward_reference

    forward = forward or rsa_forward_reference
    grads = rsa_backward(x, spec, p, upstream)
    if corrupt is not None:
        flat = grads[corrupt].reshape(-1)
        i = int(np.argmax(np.abs(flat)))
        flat[i] = -flat[i]
    params = dict(p.arrays(), x=x)

    def f(theta):
        q = p.replace(**{k: v for k, v in theta.items() if k != "x"})
        return float(np.sum(upstream * forward(theta["x"], spec, q)))

    return finite_diff_check(f, params, grads, eps=eps, seed=seed, n_coords=n_coords)

"""Operation counters and a timing harness for every transform.

Counters replay the exact contraction sequence of each implementation in
this package. Conventions: a multiply-add is 2 FLOPs, an elementwise add
or multiply is 1, L2 normalization is 3 per element plus 1 per row, and
softmax charges 4 FLOPs for each exp and each division (10 per element
with the max-subtract and the sum). ``workset`` is the peak number of
live intermediate elements, excluding inputs, outputs and parameters.
"""
from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .tensorgrid import NeighborhoodSpec, make_rng

IMPLS = ("reference", "efficient", "efficient+multiquery", "conv", "self-attention", "involution", "lambda")
RSA_IMPLS = IMPLS[:3]
CSV_HEADER = ["config_id", "impl", "median_ns", "mad_ns", "repeats", "dtype", "flops", "params", "workset"]


@dataclass(frozen=True)
class Dims:
    B: int
    T: int
    H: int
    W: int
    C: int
    spec: NeighborhoodSpec
    L: int = 1
    D: int | None = None
    G_corr: int | None = None
    normalize: bool = True

    def __post_init__(self):
        for name in ("B", "T", "H", "W", "C", "L"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.C % self.L:
            raise ValueError(f"L={self.L} must divide C={self.C}")
        if self.D is None:
            object.__setattr__(self, "D", self.CQ)
        if self.G_corr is None:
            object.__setattr__(self, "G_corr", self.CQ)
        if self.D < 1 or self.G_corr < 1 or self.CQ % self.G_corr:
            raise ValueError(f"need D >= 1 and G_corr | C_Q (C_Q={self.CQ}, G_corr={self.G_corr})")

    @property
    def N(self) -> int:
        return self.T * self.H * self.W

    @property
    def M(self) -> int:
        return self.spec.M

    @property
    def CQ(self) -> int:
        return self.C // self.L

    @property
    def config_id(self) -> str:
        return (f"B{self.B}_T{self.T}_H{self.H}_W{self.W}_C{self.C}_M{self.spec}"
                f"_L{self.L}_D{self.D}_G{self.G_corr}_n{int(self.normalize)}")

    def replace(self, **kw) -> "Dims":
        d = {k: getattr(self, k) for k in ("B", "T", "H", "W", "C", "spec", "L", "D", "G_corr", "normalize")}
        d.update(kw)
        return Dims(**d)


@dataclass
class CostReport:
    flops: int
    params: int
    workset: int
    leading_flops: int = 0  # terms carrying the highest power of M

    def to_dict(self) -> dict:
        return asdict(self)


class _Tally:
    """Accumulates FLOPs and tracks the peak of live intermediates."""

    def __init__(self):
        self.flops = 0
        self.leading = 0
        self.live: dict[str, int] = {}
        self.peak = 0

    def op(self, flops: int, out: str | None = None, size: int = 0, free=(), leading: bool = False):
        self.flops += flops
        if leading:
            self.leading += flops
        if out is not None:
            self.live[out] = size
            self.peak = max(self.peak, sum(self.live.values()))
        for name in free:
            self.live.pop(name)


def _norm_flops(rows: int, width: int) -> int:
    return 3 * rows * width + rows


def _rsa_params(d: Dims) -> int:
    C, CQ, D, M, G = d.C, d.CQ, d.D, d.M, d.G_corr
    return C * C + 2 * C * CQ + D * CQ + M * G * D + M * D + M * CQ


def _reference(d: Dims) -> _Tally:
    B, N, M, C, L, CQ, D, G = d.B, d.N, d.M, d.C, d.L, d.CQ, d.D, d.G_corr
    BN = B * N
    t = _Tally()
    t.op(0, "ctx", BN * M * C)
    t.op(2 * BN * C * C, "q", BN * C)
    t.op(2 * BN * M * C * CQ, "K", BN * M * CQ)
    t.op(2 * BN * M * C * CQ, "V", BN * M * CQ, free=["ctx"])
    if d.normalize:
        t.op(_norm_flops(BN * L, CQ) + 2 * _norm_flops(BN * M, CQ))
    t.op(2 * M * D * CQ, "P", M * CQ)
    t.op(2 * BN * L * M * CQ, "kv", BN * L * M, free=["P"])
    t.op(2 * BN * L * M * CQ, "corr", BN * L * M * G, free=["K"])
    t.op(2 * M * G * D * M, "Hm", M * G * M, leading=True)
    t.op(2 * BN * L * M * G * M, "kr", BN * L * M, free=["corr", "Hm"], leading=True)
    t.op(2 * BN * M * M * CQ, "gram", BN * M * M, leading=True)
    t.op(2 * BN * M * M * CQ, "XR", BN * M * CQ, free=["gram"], leading=True)
    t.op(BN * L * M, "kap", BN * L * M, free=["kv", "kr"])
    t.op(BN * M * CQ, "ctxs", BN * M * CQ, free=["V", "XR"])
    t.op(2 * BN * L * M * CQ, free=["kap", "ctxs", "q"])
    return t


def _efficient(d: Dims) -> _Tally:
    from .rsa_efficient import BLOCK_ELEMS
    from .tensorgrid import block_plan

    B, N, M, C, L, CQ, D = d.B, d.N, d.M, d.C, d.L, d.CQ, d.D
    BN = B * N
    rt, rh, rw = d.spec.m_t // 2, d.spec.m_h // 2, d.spec.m_w // 2
    padded = B * (d.T + 2 * rt) * (d.H + 2 * rh) * (d.W + 2 * rw) * CQ
    rows = max((bs.stop - bs.start) * (ts.stop - ts.start) * d.H * d.W
               for bs, ts in block_plan(B, (d.T, d.H, d.W), M, CQ, BLOCK_ELEMS))
    t = _Tally()
    t.op(2 * BN * C * C, "q", BN * C)
    t.op(2 * BN * C * CQ, "k", BN * CQ)
    t.op(2 * BN * C * CQ, "v", BN * CQ)
    if d.normalize:
        t.op(_norm_flops(BN * L, CQ) + 2 * _norm_flops(BN, CQ))
    t.op(0, "kpad", padded)
    t.op(0, "vpad", padded)
    t.op(0, "rH1c", M * CQ * D)
    for name, width in (("A", CQ * D), ("HV", D * CQ), ("VG", CQ * CQ)):
        t.op(0, name, BN * width)
    # one block of unfolded keys/values; the loop repeats this over BN positions
    t.op(0, "kb", rows * M * CQ)
    t.op(0, "vb", rows * M * CQ)
    t.op(2 * M * BN * CQ * D, "a", rows * CQ * D, leading=True)
    t.op(0, "vt", rows * M * CQ)
    t.op(2 * M * BN * D * CQ, "hv", rows * D * CQ, free=["vt"], leading=True)
    t.op(0, "vt", rows * M * CQ)
    t.op(2 * M * BN * CQ * CQ, "vg", rows * CQ * CQ, free=["vt"], leading=True)
    for name in ("kb", "vb", "a", "hv", "vg", "kpad", "vpad", "rH1c", "k", "v"):
        t.live.pop(name)
    t.op(BN * CQ * D + BN * CQ * CQ)
    t.op(2 * BN * L * CQ * D, "qA", BN * L * D)
    t.op(2 * BN * L * D * CQ, "t", BN * L * CQ, free=["qA"])
    t.op(2 * BN * L * CQ * CQ, free=["t", "A", "HV", "VG", "q"])
    return t


def _conv(d: Dims) -> _Tally:
    BN, M, C = d.B * d.N, d.M, d.C
    t = _Tally()
    t.op(0, "ctx", BN * M * C)
    t.op(2 * BN * M * C * C, free=["ctx"], leading=True)
    return t


def _self_attention(d: Dims) -> _Tally:
    # content + position interaction, softmax, normalized embeddings
    BN, M, C = d.B * d.N, d.M, d.C
    t = _Tally()
    t.op(0, "ctx", BN * M * C)
    t.op(2 * BN * C * C, "q", BN * C)
    t.op(2 * BN * M * C * C, "K", BN * M * C, leading=True)
    t.op(2 * BN * M * C * C, "V", BN * M * C, free=["ctx"], leading=True)
    if d.normalize:
        t.op(_norm_flops(BN, C) + 2 * _norm_flops(BN * M, C))
    t.op(2 * BN * M * C, "logits", BN * M, free=["K"])
    t.op(2 * BN * M * C + BN * M)
    t.op(10 * BN * M, "kernel", BN * M, free=["logits"])
    t.op(2 * BN * M * C, free=["kernel", "V", "q"])
    return t


def _involution(d: Dims) -> _Tally:
    BN, M, C = d.B * d.N, d.M, d.C
    t = _Tally()
    t.op(0, "ctx", BN * M * C)
    t.op(2 * BN * M * C, "kernel", BN * M, leading=True)
    t.op(2 * BN * M * C, free=["kernel", "ctx"], leading=True)
    return t


def _lambda(d: Dims) -> _Tally:
    BN, M, C = d.B * d.N, d.M, d.C
    t = _Tally()
    t.op(0, "ctx", BN * M * C)
    t.op(2 * BN * C * C, "q", BN * C)
    t.op(2 * BN * M * C * C, "V", BN * M * C, free=["ctx"], leading=True)
    t.op(2 * BN * M * C * C, "lam", BN * C * C, free=["V"], leading=True)
    t.op(2 * BN * C * C, free=["lam", "q"])
    return t


_COUNTERS = {
    "reference": (_reference, _rsa_params),
    "efficient": (_efficient, _rsa_params),
    "efficient+multiquery": (_efficient, _rsa_params),
    "conv": (_conv, lambda d: d.M * d.C * d.C),
    "self-attention": (_self_attention, lambda d: 3 * d.C * d.C + d.M * d.C),
    "involution": (_involution, lambda d: d.M * d.C),
    "lambda": (_lambda, lambda d: 2 * d.C * d.C + d.M * d.C),
}


def cost_report(dims: Dims, impl: str) -> CostReport:
    """Counted FLOPs, parameters and peak working set of one forward pass.

    ``efficient`` and ``efficient+multiquery`` share one contraction
    sequence; the first is the vectorized fast path, the second evaluates
    sub-queries one at a time.
    """
    if impl not in _COUNTERS:
        raise ValueError(f"unknown impl {impl!r}; choose from {', '.join(IMPLS)}")
    counter, params = _COUNTERS[impl]
    t = counter(dims)
    return CostReport(flops=t.flops, params=params(dims), workset=t.peak, leading_flops=t.leading)


# -- timing ----------------------------------------------------------------

@dataclass
class BenchResult:
    config_id: str
    impl: str
    median_ns: float
    mad_ns: float
    repeats: int
    dtype: str
    flops: int
    params: int
    workset: int
    skipped: str | None = None

    def row(self) -> list:
        return [getattr(self, k) for k in CSV_HEADER]


def _dims_key(d: Dims) -> list[int]:
    return [d.B, d.T, d.H, d.W, d.C, *d.spec.shape, d.L, d.D, d.G_corr, int(d.normalize)]


def make_inputs(dims: Dims, seed: int, dtype=np.float64) -> np.ndarray:
    """Input map for a config; depends only on ``(seed, dims)``, never on the impl."""
    rng = make_rng(seed, *_dims_key(dims))
    return rng.standard_normal((dims.B, dims.T, dims.H, dims.W, dims.C)).astype(dtype)


def make_transform(dims: Dims, impl: str, seed: int, dtype=np.float64):
    """Seeded parameters bound into a ``x -> y`` callable for ``impl``."""
    from . import baselines as bl
    from .rsa_efficient import multi_query_forward, rsa_forward_fast
    from .rsa_reference import init_rsa_params, rsa_forward_reference

    rng = make_rng(seed, *_dims_key(dims), 1)
    spec, C, M = dims.spec, dims.C, dims.M
    if impl in RSA_IMPLS:
        p = init_rsa_params(C, M, L=dims.L, D=dims.D, G_corr=dims.G_corr,
                            normalize=dims.normalize, rng=rng, dtype=dtype)
        fn = {"reference": rsa_forward_reference, "efficient": rsa_forward_fast,
              "efficient+multiquery": multi_query_forward}[impl]
        return lambda x: fn(x, spec, p)

    def mat(*shape):
        return (rng.standard_normal(shape) / np.sqrt(shape[0])).astype(dtype)

    if impl == "conv":
        cp = bl.ConvParams(mat(M * C, C))
        return lambda x: bl.convolution(x, spec, cp)
    if impl == "self-attention":
        sp = bl.SaParams(mat(C, C), mat(C, C), mat(C, C), mat(M, C),
                         use_content=True, use_position=True, use_softmax=True, normalize=dims.normalize)
        return lambda x: bl.self_attention(x, spec, sp)
    if impl == "involution":
        ip = bl.InvolutionParams(mat(M, C))
        return lambda x: bl.involution(x, spec, ip)
    if impl == "lambda":
        lp = bl.LambdaParams(mat(C, C), mat(C, C), mat(M, C))
        return lambda x: bl.lambda_conv(x, spec, lp)
    raise ValueError(f"unknown impl {impl!r}")


def time_callable(fn, repeats: int = 5, warmup: int = 2) -> tuple[float, float]:
    """Median and median absolute deviation of wall time in ns, warmups discarded."""
    if repeats < 5 or warmup < 2:
        raise ValueError("need repeats >= 5 and warmup >= 2")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    med = statistics.median(samples)
    mad = statistics.median(abs(s - med) for s in samples)
    return float(med), float(mad)


def bench_run(grid, repeats: int = 5, warmup: int = 2, seed: int = 0, dtype=np.float32,
              memory_budget: int = 2 * 1024 ** 3, threads: int | None = None) -> list[BenchResult]:
    """Time each ``(Dims, impl)`` pair sequentially.

    Configs whose counted working set exceeds ``memory_budget`` bytes, or
    that fail to allocate, come back with ``skipped`` set instead of timings.
    """
    from threadpoolctl import threadpool_limits

    dtype = np.dtype(dtype)
    results = []
    with threadpool_limits(limits=threads):
        for dims, impl in grid:
            cost = cost_report(dims, impl)
            res = BenchResult(dims.config_id, impl, float("nan"), float("nan"), repeats, dtype.name,
                              cost.flops, cost.params, cost.workset)
            if cost.workset * dtype.itemsize > memory_budget:
                res.skipped = f"working set {cost.workset * dtype.itemsize} B exceeds budget {memory_budget} B"
                results.append(res)
                continue
            try:
                x = make_inputs(dims, seed, dtype)
                fn = make_transform(dims, impl, seed, dtype)
                res.median_ns, res.mad_ns = time_callable(lambda: fn(x), repeats, warmup)
            except MemoryError as exc:
                res.skipped = f"allocation failed: {exc}"
            results.append(res)
    return results


def write_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in results:
            if r.skipped is None:
                w.writerow(r.row())


def summarize(results) -> dict:
    return {
        "results": [asdict(r) for r in results if r.skipped is None],
        "skipped": [{"config_id": r.config_id, "impl": r.impl, "reason": r.skipped}
                    for r in results if r.skipped is not None],
    }


def write_json(doc: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def rank_agreement(results, impl: str) -> float:
    """Spearman correlation between measured medians and counted FLOPs for one impl."""
    from scipy.stats import spearmanr

    rows = [r for r in results if r.impl == impl and r.skipped is None]
    if len(rows) < 3:
        raise ValueError(f"need at least 3 timed configs for {impl!r}")
    rho = spearmanr([r.median_ns for r in rows], [r.flops for r in rows]).statistic
    return float(rho)


TABLE4C_KERNELS = ("3x3x3", "3x5x5", "3x7x7", "3x9x9", "5x7x7", "5x9x9")


def kernel_grid(base: Dims, kernels=TABLE4C_KERNELS, impls=("reference", "efficient")):
    return [(base.replace(spec=NeighborhoodSpec.parse(k)), impl) for impl in impls for k in kernels]

"""Synthetic motion-direction probe.

Clips show a bar translating one pixel per frame. Up/Down clips use a
horizontal bar, Left/Right a vertical one, and every Down (Right) clip is
the exact frame reversal of a freshly drawn Up (Left) clip. A model is an
input projection, one transform layer, global average pooling and a linear
classifier. Content-only softmax attention followed by average pooling is
provably blind to frame reversal, so it can only learn orientation.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import baselines as bl
from .gradients import involution_vjp, rsa_vjp, self_attention_vjp
from .rsa_efficient import rsa_forward_fast
from .rsa_reference import RsaParams, embed, init_rsa_params, relational_kernel, basic_kernel
from .tensorgrid import NeighborhoodSpec, make_rng, softmax, unfold

LABELS = ("Up", "Down", "Left", "Right")
TRANSFORMS = ("rsa", "sa-content", "sa-full", "involution")
CHECKPOINT_FORMAT = "rsalab-checkpoint/1"


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


# -- data -----------------------------------------------------------------

@dataclass
class Clip:
    data: np.ndarray  # [1, T, H, W, C_in]
    label: int
    pair_id: int
    split: str = "train"

    @property
    def name(self) -> str:
        return LABELS[self.label]


def _bar_clip(rng, T, H, W, horizontal: bool) -> np.ndarray:
    """Bar moving toward lower row (horizontal) or column (vertical) indices."""
    extent = H if horizontal else W
    thickness = int(rng.integers(1, 4))
    travel = T - 1
    if thickness + travel > extent:
        raise ValueError(f"bar of thickness {thickness} cannot travel {travel} px in {extent} px")
    start = int(rng.integers(travel, extent - thickness + 1))
    frames = np.zeros((T, H, W), dtype=np.float64)
    for t in range(T):
        lo = start - t
        if horizontal:
            frames[t, lo:lo + thickness, :] = 1.0
        else:
            frames[t, :, lo:lo + thickness] = 1.0
    bias = np.ones_like(frames)
    return np.stack([frames, bias], axis=-1)[None]


def reverse_clip(data: np.ndarray) -> np.ndarray:
    """Frame-order reversal of a ``[B,T,H,W,C]`` map."""
    return np.ascontiguousarray(data[:, ::-1])


def gen_dataset(seed: int, n_per_class: int, T: int = 8, H: int = 16, W: int = 16,
                test_fraction: float = 0.2) -> list[Clip]:
    """Balanced moving-bar clips, reversal-paired, split by pair.

    Both members of a reversal pair always land in the same split.
    """
    if T < 4 or H < 8 or W < 8 or n_per_class < 1:
        raise ValueError("need T >= 4, H, W >= 8 and n_per_class >= 1")
    if T + 2 > min(H, W):
        raise ValueError(f"T={T} frames of motion would wrap around a {H}x{W} frame")
    rng = make_rng(seed)
    n_test = int(round(n_per_class * test_fraction))
    test_pairs = set(rng.permutation(n_per_class)[:n_test].tolist())
    clips = []
    pair = 0
    for horizontal, fwd, rev in ((True, 0, 1), (False, 2, 3)):
        for i in range(n_per_class):
            split = "test" if i in test_pairs else "train"
            first = _bar_clip(rng, T, H, W, horizontal)
            fresh = _bar_clip(rng, T, H, W, horizontal)
            clips.append(Clip(first, fwd, pair, split))
            clips.append(Clip(reverse_clip(fresh), rev, pair + 1, split))
            pair += 2
    return clips


def reversal_pairs(clips: list[Clip]):
    """``(clip, reversed_partner_data)`` for every clip in the list."""
    return [(c, reverse_clip(c.data)) for c in clips]


def stack(clips: list[Clip]):
    return np.concatenate([c.data for c in clips]), np.array([c.label for c in clips])


# -- model ----------------------------------------------------------------

@dataclass
class ProbeConfig:
    transform: str = "rsa"
    C_in: int = 2
    C: int = 16
    L: int = 2
    D: int = 8
    G_corr: int | None = None
    window: str = "3x3x3"
    normalize: bool = True
    n_classes: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"transform must be one of {TRANSFORMS}, got {self.transform!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def spec(self) -> NeighborhoodSpec:
        return NeighborhoodSpec.parse(self.window)


@dataclass
class ProbeModel:
    config: ProbeConfig
    params: dict[str, np.ndarray]
    seed: int = 0

    @property
    def spec(self) -> NeighborhoodSpec:
        return self.config.spec

    def rsa_params(self) -> RsaParams:
        c = self.config
        return RsaParams(**{k: self.params[k] for k in RsaParams.NAMES},
                         L=c.L, G_corr=c.G_corr or c.C // c.L, normalize=c.normalize)

    def sa_params(self) -> bl.SaParams:
        return bl.SaParams(self.params["E_Q"], self.params["E_K"], self.params["E_V"], self.params["P"],
                           use_content=True, use_position=self.config.transform == "sa-full",
                           use_softmax=True, normalize=self.config.normalize)

    def transform(self, h: np.ndarray) -> np.ndarray:
        kind = self.config.transform
        if kind == "rsa":
            return rsa_forward_fast(h, self.spec, self.rsa_params())
        if kind == "involution":
            return bl.involution(h, self.spec, bl.InvolutionParams(self.params["P"]))
        return bl.self_attention(h, self.spec, self.sa_params())

    def transform_vjp(self, h: np.ndarray):
        kind = self.config.transform
        if kind == "rsa":
            return rsa_vjp(h, self.spec, self.rsa_params())
        if kind == "involution":
            return involution_vjp(h, self.spec, self.params["P"])
        return self_attention_vjp(h, self.spec, self.sa_params())

    def _input(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=self.config.dtype)

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = self._input(x) @ self.params["W_in"]
        pooled = self.transform(h).mean(axis=(1, 2, 3))
        return pooled @ self.params["W_cls"]

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray):
        """Mean softmax cross-entropy over the batch and its parameter gradients."""
        B = x.shape[0]
        x = self._input(x)
        h = x @ self.params["W_in"]
        y, pullback = self.transform_vjp(h)
        pooled = y.mean(axis=(1, 2, 3))
        logits = pooled @ self.params["W_cls"]
        prob = softmax(logits)
        loss = -np.mean(np.log(prob[np.arange(B), labels] + 1e-300))

        glogits = prob.copy()
        glogits[np.arange(B), labels] -= 1.0
        glogits /= B
        grads = {"W_cls": pooled.T @ glogits}
        gpool = glogits @ self.params["W_cls"].T
        N = np.prod(y.shape[1:4])
        gy = np.broadcast_to((gpool / N)[:, None, None, None, :], y.shape).copy()
        tg = pullback(gy)
        gh = tg.pop("x")
        grads.update(tg)
        grads["W_in"] = x.reshape(-1, x.shape[-1]).T @ gh.reshape(-1, gh.shape[-1])
        return loss, logits, grads


def init_probe(config: ProbeConfig, seed: int = 0) -> ProbeModel:
    rng = make_rng(seed, 7)
    c = config
    M = c.spec.M
    params = {"W_in": rng.normal(0.0, 1.0 / np.sqrt(c.C_in), (c.C_in, c.C))}
    if c.transform == "rsa":
        rp = init_rsa_params(c.C, M, L=c.L, D=c.D, G_corr=c.G_corr, normalize=c.normalize, rng=rng)
        params.update(rp.arrays())
    elif c.transform == "involution":
        params["P"] = rng.uniform(-1, 1, (M, c.C)) / np.sqrt(c.C)
    else:
        for name in ("E_Q", "E_K", "E_V"):
            params[name] = rng.normal(0.0, np.sqrt(2.0 / c.C), (c.C, c.C))
        params["P"] = rng.uniform(-1, 1, (M, c.C)) / np.sqrt(c.C)
    params["W_cls"] = rng.normal(0.0, 1.0 / np.sqrt(c.C), (c.C, c.n_classes))
    return ProbeModel(config, {k: v.astype(c.dtype) for k, v in params.items()}, seed)


# -- training -------------------------------------------------------------

@dataclass
class TrainReport:
    seed: int
    config: dict
    epochs: list[dict] = field(default_factory=list)
    paired_gap: float | None = None
    status: str = "ok"

    @property
    def final(self) -> dict:
        return self.epochs[-1] if self.epochs else {}

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: ProbeModel, clips: list[Clip], batch_size: int = 32) -> tuple[float, float]:
    if not clips:
        return float("nan"), float("nan")
    losses, correct = 0.0, 0
    for i in range(0, len(clips), batch_size):
        x, y = stack(clips[i:i + batch_size])
        logits = model.logits(x)
        prob = softmax(logits)
        losses += -np.sum(np.log(prob[np.arange(len(y)), y] + 1e-300))
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return losses / len(clips), correct / len(clips)


def train(config: ProbeConfig, data: list[Clip], epochs: int = 30, lr: float = 0.5, seed: int = 0,
          batch_size: int = 16, clip_norm: float | None = 1.0, checkpoint: str | None = None,
          eval_every: int = 1, log=None) -> tuple[ProbeModel, TrainReport]:
    """Mini-batch gradient descent on softmax cross-entropy.

    No momentum or weight decay. When ``clip_norm`` is set, a step whose
    global gradient norm exceeds it is scaled down to that norm; the
    transform is a cubic polynomial in its mixing parameters, so unclipped
    steps can run away. Deterministic given ``seed``. Raises
    :class:`TrainingDiverged` on a non-finite loss. Writes a checkpoint
    after the last epoch if ``checkpoint`` (a path prefix) is given.
    """
    model = init_probe(config, seed)
    train_set = [c for c in data if c.split == "train"]
    test_set = [c for c in data if c.split == "test"]
    report = TrainReport(seed=seed, config=asdict(config) | {"epochs": epochs, "lr": lr, "batch_size": batch_size,
                                                            "clip_norm": clip_norm})
    for epoch in range(epochs):
        order = make_rng(seed, 11, epoch).permutation(len(train_set))
        run_loss = 0.0
        for i in range(0, len(order), batch_size):
            batch = [train_set[j] for j in order[i:i + batch_size]]
            x, y = stack(batch)
            loss, _, grads = model.loss_and_grads(x, y)
            if not np.isfinite(loss):
                report.status = "diverged"
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", report)
            run_loss += loss * len(batch)
            step = lr
            if clip_norm is not None:
                gnorm = float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in grads.values())))
                step = lr * min(1.0, clip_norm / max(gnorm, 1e-30))
            for k, g in grads.items():
                model.params[k] = model.params[k] - step * g
        row = {"epoch": epoch, "train_loss": run_loss / max(len(train_set), 1)}
        if (epoch + 1) % eval_every == 0 or epoch == epochs - 1:
            _, row["train_acc"] = evaluate(model, train_set)
            row["test_loss"], row["test_acc"] = evaluate(model, test_set)
        report.epochs.append(row)
        if log:
            log(row)
    report.paired_gap = paired_logit_test(model, test_set or train_set)
    if checkpoint:
        save_checkpoint(model, checkpoint)
    return model, report


# -- reversal diagnostics -------------------------------------------------

def paired_logit_gaps(model: ProbeModel, clips: list[Clip], batch_size: int = 32) -> np.ndarray:
    """Per clip, ``max |logits(clip) - logits(reverse(clip))|``."""
    gaps = []
    for i in range(0, len(clips), batch_size):
        x, _ = stack(clips[i:i + batch_size])
        gaps.append(np.max(np.abs(model.logits(x) - model.logits(reverse_clip(x))), axis=1))
    return np.concatenate(gaps) if gaps else np.zeros(0)


def paired_logit_test(model: ProbeModel, clips: list[Clip]) -> float:
    return float(np.max(paired_logit_gaps(model, clips), initial=0.0))


def position_kernels(model: ProbeModel, x: np.ndarray, position: tuple[int, int, int]) -> dict:
    """Dynamic kernels at one position, ``{kind: [n_kernels, M]}``."""
    _, T, H, W, _ = x.shape
    t, hh, ww = position
    if not (0 <= t < T and 0 <= hh < H and 0 <= ww < W):
        raise ValueError(f"position {position} outside grid {(T, H, W)}")
    n = (t * H + hh) * W + ww
    h = x @ model.params["W_in"]
    kind = model.config.transform
    if kind == "rsa":
        p = model.rsa_params()
        q, K, _ = embed(h, model.spec, p)
        q, K = q[0, n], K[0, n]
        return {"basic": basic_kernel(q, p), "relational": relational_kernel(q, K[None], p)}
    target = h[0].reshape(-1, h.shape[-1])[n]
    ctx = unfold(h, model.spec)[0, n]
    if kind == "involution":
        return {"basic": (target @ model.params["P"].T)[None]}
    sp = model.sa_params()
    q, K, _ = bl.sa_embed(target, ctx, sp)
    return {"softmax": bl.attention_kernel(q, K, sp.P, sp)[None]}


def motion_center(clip: Clip) -> tuple[int, int, int]:
    """Middle frame and the bar's center pixel in it (grid center if the frame is blank)."""
    _, T, H, W, _ = clip.data.shape
    t = T // 2
    hs, ws = np.nonzero(clip.data[0, t, :, :, 0])
    if hs.size == 0:
        return t, H // 2, W // 2
    return t, int(np.median(hs)), int(np.median(ws))


def _write_kernel_csv(path: str, kernel: np.ndarray, spec: NeighborhoodSpec):
    grid = kernel.reshape(spec.shape)
    blocks = ["\n".join(",".join(repr(float(v)) for v in row) for row in plane) for plane in grid]
    with open(path, "w") as fh:
        fh.write("\n\n".join(blocks) + "\n")


def read_kernel_csv(path: str) -> np.ndarray:
    """Inverse of the dump format: ``[m_t, m_h, m_w]``."""
    with open(path) as fh:
        planes = [b for b in fh.read().strip().split("\n\n")]
    return np.array([[[float(v) for v in line.split(",")] for line in p.splitlines()] for p in planes])


def dump_kernels(model: ProbeModel, clip: Clip, position: tuple[int, int, int], out_dir: str) -> list[str]:
    """Write the kernels at ``position`` and at its time-mirrored position in the reversed clip.

    One CSV per (kind, kernel index, original/reversed); returns the paths.
    """
    if not os.path.isdir(out_dir):
        raise FileNotFoundError(f"output directory {out_dir!r} does not exist")
    T = clip.data.shape[1]
    t, hh, ww = position
    variants = {
        "original": position_kernels(model, clip.data, position),
        "reversed": position_kernels(model, reverse_clip(clip.data), (T - 1 - t, hh, ww)),
    }
    paths = []
    for variant, kernels in variants.items():
        for kind, ks in kernels.items():
            for i, k in enumerate(ks):
                path = os.path.join(out_dir, f"{kind}_q{i}_{variant}.csv")
                _write_kernel_csv(path, k, model.spec)
                paths.append(path)
    return paths


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(model: ProbeModel, prefix: str) -> tuple[str, str]:
    """Write ``prefix.json`` (manifest) and ``prefix.bin`` (little-endian float64 blob)."""
    tensors, offset = [], 0
    blob_path, manifest_path = prefix + ".bin", prefix + ".json"
    with open(blob_path, "wb") as fh:
        for name in sorted(model.params):
            raw = np.ascontiguousarray(model.params[name], dtype="<f8").tobytes()
            fh.write(raw)
            tensors.append({"name": name, "shape": list(model.params[name].shape), "dtype": "<f8",
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": CHECKPOINT_FORMAT, "config": asdict(model.config), "seed": model.seed,
                "blob": os.path.basename(blob_path), "tensors": tensors}
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest_path, blob_path


def load_checkpoint(manifest_path: str) -> ProbeModel:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unknown checkpoint format {manifest.get('format')!r}")
    config = ProbeConfig(**manifest["config"])
    expected = init_probe(config).params
    blob_path = os.path.join(os.path.dirname(manifest_path), manifest["blob"])
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    params = {}
    for t in manifest["tensors"]:
        name, shape = t["name"], tuple(t["shape"])
        if name not in expected or expected[name].shape != shape:
            raise ValueError(f"tensor {name!r} with shape {shape} does not fit config")
        n = int(np.prod(shape)) * 8
        if t["nbytes"] != n or t["offset"] + n > len(blob):
            raise ValueError(f"tensor {name!r} has an inconsistent byte range")
        params[name] = np.frombuffer(blob, dtype=t["dtype"], count=n // 8, offset=t["offset"]).reshape(shape).astype(config.dtype)
    missing = set(expected) - set(params)
    if missing:
        raise ValueError(f"checkpoint lacks tensors {sorted(missing)}")
    return ProbeModel(config, params, manifest.get("seed", 0))

"""Command-line entry point: ``rsalab <command> [flags]``.

Every command takes ``--config FILE`` (JSON) plus flags; flags win over
file values, and the merged document is schema-checked before anything
runs. Exit codes: 0 pass, 1 check failed, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import itertools
import json
import os
import sys

import jsonschema
import numpy as np

from . import analysis, probe
from .gradients import rsa_gradcheck
from .rsa_efficient import multi_query_forward, rsa_forward_fast
from .rsa_reference import init_rsa_params, rsa_forward_reference
from .tensorgrid import NeighborhoodSpec, make_rng

DTYPES = {"f32": np.float32, "f64": np.float64}
U64 = {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}
WINDOW = {"type": "string", "pattern": r"^[0-9]+x[0-9]+x[0-9]+$"}
POS = {"type": "integer", "minimum": 1}

COMMON = {
    "seed": U64,
    "dtype": {"enum": list(DTYPES)},
    "threads": {"type": ["integer", "null"], "minimum": 1},
    "out": {"type": "string"},
}

EQUIV_CASE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["C", "L", "G_corr", "window", "normalize"],
    "properties": {"C": POS, "L": POS, "G_corr": POS, "D": POS, "window": WINDOW, "normalize": {"type": "boolean"},
                   "B": POS, "T": POS, "H": POS, "W": POS},
}

COMMANDS = {
    "equiv": {
        "defaults": {"seed": 0, "dtype": "f64", "threads": None, "out": ".", "n_cases": 24, "tolerance": 1e-10,
                     "cases": None},
        "properties": {"n_cases": POS, "tolerance": {"type": "number", "minimum": 0},
                       "cases": {"type": ["array", "null"], "items": EQUIV_CASE}},
    },
    "gradcheck": {
        "defaults": {"seed": 0, "dtype": "f64", "threads": None, "out": ".", "C": 6, "L": 2, "D": 2,
                     "G_corr": None, "window": "3x1x1", "B": 1, "T": 3, "H": 3, "W": 3, "normalize": True,
                     "eps": 1e-5, "tolerance": 1e-4, "n_coords": 256, "corrupt": None},
        "properties": {"C": POS, "L": POS, "D": POS, "G_corr": {"type": ["integer", "null"], "minimum": 1},
                       "window": WINDOW, "B": POS, "T": POS, "H": POS, "W": POS, "normalize": {"type": "boolean"},
                       "eps": {"type": "number", "minimum": 1e-7, "maximum": 1e-3},
                       "tolerance": {"type": "number", "exclusiveMinimum": 0}, "n_coords": POS,
                       "corrupt": {"type": ["string", "null"]}},
    },
    "bench": {
        "defaults": {"seed": 0, "dtype": "f32", "threads": None, "out": ".",
                     "kernel_sizes": list(analysis.TABLE4C_KERNELS), "impls": ["reference", "efficient"],
                     "B": 1, "T": 4, "H": 8, "W": 8, "C": 64, "L": 8, "repeats": 5, "warmup": 2,
                     "memory_budget": 2 * 1024 ** 3},
        "properties": {"kernel_sizes": {"type": "array", "items": WINDOW},
                       "impls": {"type": "array", "minItems": 1, "items": {"enum": list(analysis.IMPLS)}},
                       "B": POS, "T": POS, "H": POS, "W": POS, "C": POS, "L": POS,
                       "repeats": {"type": "integer", "minimum": 5}, "warmup": {"type": "integer", "minimum": 2},
                       "memory_budget": POS},
    },
    "probe": {
        "defaults": {"seed": 0, "dtype": "f32", "threads": None, "out": ".", "transform": "rsa",
                     "n_per_class": 200, "T": 8, "H": 16, "W": 16, "C": 16, "L": 2, "D": 8, "window": "3x3x3",
                     "normalize": True, "epochs": 10, "lr": 0.5, "batch_size": 16, "clip_norm": 1.0},
        "properties": {"transform": {"enum": list(probe.TRANSFORMS)}, "n_per_class": POS, "T": POS, "H": POS,
                       "W": POS, "C": POS, "L": POS, "D": POS, "window": WINDOW, "normalize": {"type": "boolean"},
                       "epochs": {"type": "integer", "minimum": 1, "maximum": 50},
                       "lr": {"type": "number", "exclusiveMinimum": 0}, "batch_size": POS,
                       "clip_norm": {"type": ["number", "null"], "exclusiveMinimum": 0}},
    },
    "dump-kernels": {
        "defaults": {"seed": 0, "dtype": "f64", "threads": None, "out": ".", "checkpoint": None,
                     "transform": "rsa", "clip_index": 0, "position": None, "n_per_class": 1,
                     "T": 8, "H": 16, "W": 16},
        "properties": {"checkpoint": {"type": ["string", "null"]}, "transform": {"enum": list(probe.TRANSFORMS)},
                       "clip_index": {"type": "integer", "minimum": 0},
                       "position": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0},
                                    "minItems": 3, "maxItems": 3},
                       "n_per_class": POS, "T": POS, "H": POS, "W": POS},
    },
}
# flops shares the bench grid but never times anything
COMMANDS["flops"] = {
    "defaults": {k: v for k, v in COMMANDS["bench"]["defaults"].items() if k not in ("repeats", "warmup")},
    "properties": {k: v for k, v in COMMANDS["bench"]["properties"].items() if k not in ("repeats", "warmup")},
}


class ConfigError(Exception):
    pass


def schema(command: str) -> dict:
    return {"type": "object", "additionalProperties": False,
            "properties": COMMON | COMMANDS[command]["properties"]}


def resolve_config(command: str, file_path: str | None, overrides: dict) -> dict:
    """Defaults, then the config file, then flags; validated as a whole."""
    doc = dict(COMMANDS[command]["defaults"])
    if file_path:
        try:
            with open(file_path) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {file_path!r}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        doc.update(loaded)
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        jsonschema.validate(doc, schema(command))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    return doc


def _spec(text: str) -> NeighborhoodSpec:
    try:
        return NeighborhoodSpec.parse(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _emit(cfg: dict, name: str, report: dict) -> None:
    report = {"command": name, "config": cfg} | report
    text = json.dumps(report, indent=2, sort_keys=True, allow_nan=True)
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], f"{name}.json"), "w") as fh:
        fh.write(text + "\n")
    print(text)


# -- equiv -------------------------------------------------------------------

EQUIV_AXES = {
    "L": (1, 2, 4),
    "G_corr": ("1", "2", "CQ"),
    "window": ("3x1x1", "3x3x3", "5x7x7"),
    "C": (8, 16, 64),
    "normalize": (True, False),
}


def default_equiv_cases(n: int, seed: int = 0) -> list[dict]:
    """``n`` cases drawn without replacement from the full factorial grid.

    The first cases cycle every axis value so that any ``n >= 3`` covers
    each value of each axis at least once.
    """
    grid = list(itertools.product(*EQUIV_AXES.values()))
    order = make_rng(seed, 3).permutation(len(grid)).tolist()
    picked = []
    for i in range(3):
        want = [vals[i % len(vals)] for vals in EQUIV_AXES.values()]
        picked.append(grid.index(tuple(want)))
    picked += [j for j in order if j not in picked]
    cases = []
    for j in picked[:n]:
        L, g, window, C, norm = grid[j]
        CQ = C // L
        cases.append({"C": C, "L": L, "G_corr": CQ if g == "CQ" else min(int(g), CQ), "window": window,
                      "normalize": norm})
    return cases


def run_equiv_case(case: dict, seed: int, dtype=np.float64) -> dict:
    spec = _spec(case["window"])
    C, L = case["C"], case["L"]
    if C % L or (C // L) % case["G_corr"]:
        raise ConfigError(f"case {case}: need L | C and G_corr | C/L")
    B = case.get("B", 1)
    T = case.get("T", max(3, spec.m_t))
    H = case.get("H", max(4, spec.m_h))
    W = case.get("W", max(4, spec.m_w))
    rng = make_rng(seed, C, L, case["G_corr"], spec.M)
    p = init_rsa_params(C, spec.M, L=L, D=case.get("D"), G_corr=case["G_corr"], normalize=case["normalize"],
                        rng=rng, dtype=dtype)
    x = rng.standard_normal((B, T, H, W, C)).astype(dtype)
    ref = rsa_forward_reference(x, spec, p)
    gap_fast = float(np.max(np.abs(rsa_forward_fast(x, spec, p) - ref)))
    gap_mq = float(np.max(np.abs(multi_query_forward(x, spec, p) - ref)))
    return {"case": case | {"B": B, "T": T, "H": H, "W": W}, "gap_fast": gap_fast, "gap_multiquery": gap_mq,
            "max_gap": max(gap_fast, gap_mq)}


def cmd_equiv(cfg: dict) -> int:
    cases = cfg["cases"] if cfg["cases"] is not None else default_equiv_cases(cfg["n_cases"], cfg["seed"])
    dtype = DTYPES[cfg["dtype"]]
    rows = [run_equiv_case(c, cfg["seed"], dtype) for c in cases]
    worst = max((r["max_gap"] for r in rows), default=0.0)
    ok = bool(rows) and worst <= cfg["tolerance"]
    _emit(cfg, "equiv", {"passed": ok, "max_gap": worst, "cases": rows})
    return 0 if ok else 1


# -- gradcheck ---------------------------------------------------------------

def cmd_gradcheck(cfg: dict) -> int:
    if cfg["dtype"] != "f64":
        raise ConfigError("gradcheck needs dtype f64; central differences are meaningless in f32")
    spec = _spec(cfg["window"])
    C, L = cfg["C"], cfg["L"]
    if C % L:
        raise ConfigError(f"L={L} must divide C={C}")
    rng = make_rng(cfg["seed"], 5)
    try:
        p = init_rsa_params(C, spec.M, L=L, D=cfg["D"], G_corr=cfg["G_corr"], normalize=cfg["normalize"],
                            rng=rng, dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["corrupt"] is not None and cfg["corrupt"] not in (*p.NAMES, "x"):
        raise ConfigError(f"corrupt must name one of {(*p.NAMES, 'x')}, got {cfg['corrupt']!r}")
    x = rng.standard_normal((cfg["B"], cfg["T"], cfg["H"], cfg["W"], C))
    upstream = rng.standard_normal(x.shape)
    report = rsa_gradcheck(x, spec, p, upstream, eps=cfg["eps"], seed=cfg["seed"], n_coords=cfg["n_coords"],
                           corrupt=cfg["corrupt"])
    ok = report.passed(cfg["tolerance"])
    _emit(cfg, "gradcheck", {"passed": ok} | report.to_dict())
    return 0 if ok else 1


# -- bench / flops -----------------------------------------------------------

def _grid(cfg: dict):
    if not cfg["kernel_sizes"]:
        raise ConfigError("kernel_sizes is empty; nothing to run")
    specs = [_spec(k) for k in cfg["kernel_sizes"]]
    try:
        base = analysis.Dims(cfg["B"], cfg["T"], cfg["H"], cfg["W"], cfg["C"], specs[0], L=cfg["L"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for s in specs:
        for size, m in zip((cfg["T"], cfg["H"], cfg["W"]), s.shape):
            if m > 2 * size + 1:
                raise ConfigError(f"window {s} too large for grid T,H,W={cfg['T']},{cfg['H']},{cfg['W']}")
    return [(base.replace(spec=s), impl) for impl in cfg["impls"] for s in specs]


def _ratios(rows: list[dict]) -> dict:
    """Per impl, last-to-first counted FLOPs along the kernel list."""
    out = {}
    for impl in dict.fromkeys(r["impl"] for r in rows):
        mine = [r for r in rows if r["impl"] == impl]
        if len(mine) >= 2 and mine[0]["flops"]:
            out[impl] = mine[-1]["flops"] / mine[0]["flops"]
    return out


def cmd_flops(cfg: dict) -> int:
    rows = []
    for dims, impl in _grid(cfg):
        c = analysis.cost_report(dims, impl)
        rows.append({"config_id": dims.config_id, "impl": impl, "M": dims.M} | c.to_dict())
    ratios = _ratios(rows)
    for r in rows:
        print(f"{r['config_id']:48s} {r['impl']:22s} flops={r['flops']} params={r['params']} workset={r['workset']}",
              file=sys.stderr)
    for impl, ratio in ratios.items():
        print(f"{impl}: flops ratio last/first kernel = {ratio:.4f}", file=sys.stderr)
    _emit(cfg, "flops", {"rows": rows, "ratio_last_first": ratios})
    return 0


def cmd_bench(cfg: dict) -> int:
    grid = _grid(cfg)
    results = analysis.bench_run(grid, repeats=cfg["repeats"], warmup=cfg["warmup"], seed=cfg["seed"],
                                 dtype=DTYPES[cfg["dtype"]], memory_budget=cfg["memory_budget"],
                                 threads=cfg["threads"])
    os.makedirs(cfg["out"], exist_ok=True)
    analysis.write_csv(results, os.path.join(cfg["out"], "bench.csv"))
    rho = {}
    for impl in cfg["impls"]:
        try:
            rho[impl] = analysis.rank_agreement(results, impl)
        except ValueError:
            rho[impl] = None
    _emit(cfg, "bench", analysis.summarize(results) | {"spearman": rho})
    return 0


# -- probe -------------------------------------------------------------------

def _probe_config(cfg: dict) -> probe.ProbeConfig:
    try:
        return probe.ProbeConfig(transform=cfg["transform"], C=cfg["C"], L=cfg["L"], D=cfg["D"],
                                 window=cfg["window"], normalize=cfg["normalize"],
                                 dtype="float32" if cfg["dtype"] == "f32" else "float64")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_probe(cfg: dict) -> int:
    pc = _probe_config(cfg)
    _spec(cfg["window"])
    try:
        data = probe.gen_dataset(cfg["seed"], cfg["n_per_class"], cfg["T"], cfg["H"], cfg["W"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    os.makedirs(cfg["out"], exist_ok=True)
    prefix = os.path.join(cfg["out"], f"probe_{cfg['transform']}")
    status = "ok"
    try:
        model, report = probe.train(pc, data, epochs=cfg["epochs"], lr=cfg["lr"], seed=cfg["seed"],
                                    batch_size=cfg["batch_size"], clip_norm=cfg["clip_norm"], checkpoint=prefix,
                                    log=lambda row: print(json.dumps(row), file=sys.stderr))
    except probe.TrainingDiverged as exc:
        report, status = exc.report, "diverged"
        _emit(cfg, "probe", {"status": status, "epochs": report.epochs})
        return 1
    test = [c for c in data if c.split == "test"]
    gaps = probe.paired_logit_gaps(model, test)
    final = report.final
    _emit(cfg, "probe", {
        "status": status,
        "train_acc": final.get("train_acc"),
        "test_acc": final.get("test_acc"),
        "paired_gap": float(np.max(gaps, initial=0.0)),
        "paired_gap_min": float(np.min(gaps, initial=np.inf)) if gaps.size else None,
        "frac_pairs_gap_gt_1e-3": float(np.mean(gaps > 1e-3)) if gaps.size else None,
        "checkpoint": prefix + ".json",
        "epochs": report.epochs,
    })
    return 0


def cmd_dump_kernels(cfg: dict) -> int:
    if cfg["checkpoint"]:
        try:
            model = probe.load_checkpoint(cfg["checkpoint"])
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load checkpoint {cfg['checkpoint']!r}: {exc}") from None
    else:
        pc = _probe_config({"transform": cfg["transform"], "C": 16, "L": 2, "D": 8, "window": "3x3x3",
                            "normalize": True, "dtype": cfg["dtype"]})
        model = probe.init_probe(pc, cfg["seed"])
    try:
        data = probe.gen_dataset(cfg["seed"], cfg["n_per_class"], cfg["T"], cfg["H"], cfg["W"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["clip_index"] >= len(data):
        raise ConfigError(f"clip_index {cfg['clip_index']} out of range for {len(data)} clips")
    clip = data[cfg["clip_index"]]
    pos = tuple(cfg["position"]) if cfg["position"] else probe.motion_center(clip)
    if not os.path.isdir(cfg["out"]):
        raise ConfigError(f"output directory {cfg['out']!r} does not exist")
    try:
        paths = probe.dump_kernels(model, clip, pos, cfg["out"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    diffs = {}
    for path in paths:
        name = os.path.basename(path)
        if name.endswith("_original.csv"):
            other = path[: -len("_original.csv")] + "_reversed.csv"
            key = name[: -len("_original.csv")]
            diffs[key] = float(np.max(np.abs(probe.read_kernel_csv(path) - probe.read_kernel_csv(other))))
    _emit(cfg, "dump-kernels", {"clip": clip.name, "position": list(pos), "files": sorted(os.path.basename(p) for p in paths),
                                "max_abs_diff_original_vs_reversed": diffs})
    return 0


HANDLERS = {"equiv": cmd_equiv, "gradcheck": cmd_gradcheck, "bench": cmd_bench, "flops": cmd_flops,
            "probe": cmd_probe, "dump-kernels": cmd_dump_kernels}


# -- argument parsing --------------------------------------------------------

def _csv_list(text: str) -> list[str]:
    return [t for t in (s.strip() for s in text.split(",")) if t]


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsalab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--dtype", choices=list(DTYPES))
        p.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads (1 = serial)")
        p.add_argument("--out", help="output directory")
        return p

    p = add("equiv", "reference vs efficient path equality suite")
    p.add_argument("--n-cases", type=int, dest="n_cases")
    p.add_argument("--tolerance", type=float)

    p = add("gradcheck", "analytic gradients vs central differences")
    p.add_argument("--eps", type=float)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--n-coords", type=int, dest="n_coords")
    p.add_argument("--window")
    p.add_argument("--normalize", type=_bool)
    p.add_argument("--corrupt", metavar="NAME", help="debug: flip the sign of one gradient entry of NAME")

    for name, text in (("bench", "time implementations over a kernel-size grid"),
                       ("flops", "counted FLOPs, params and working set over a kernel-size grid")):
        p = add(name, text)
        p.add_argument("--kernel-sizes", type=_csv_list, dest="kernel_sizes", metavar="3x3x3,5x7x7,...")
        p.add_argument("--impls", type=_csv_list)
        for dim in ("B", "T", "H", "W", "C", "L"):
            p.add_argument(f"--{dim}", type=int, dest=dim)
        if name == "bench":
            p.add_argument("--repeats", type=int)
            p.add_argument("--warmup", type=int)

    p = add("probe", "train the motion-direction probe")
    p.add_argument("--transform", choices=probe.TRANSFORMS)
    p.add_argument("--n-per-class", type=int, dest="n_per_class")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--window")
    p.add_argument("--normalize", type=_bool)

    p = add("dump-kernels", "write dynamic kernels for a clip and its time reversal")
    p.add_argument("--checkpoint", help="probe checkpoint manifest (.json); untrained model if omitted")
    p.add_argument("--transform", choices=probe.TRANSFORMS)
    p.add_argument("--clip-index", type=int, dest="clip_index")
    p.add_argument("--position", type=lambda s: [int(v) for v in s.split(",")], metavar="T,H,W",
                   help="default: center of the bar in the middle frame")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = resolve_config(args.command, args.config, overrides)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=cfg["threads"]):
            return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"rsalab {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"rsalab {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``convkern <command> <action> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data, featoracle, gram, krr, theory, verify
from .ckmap import ArchSpec
from .domain import Grid, gaussian_filter

log = logging.getLogger("convkern")


class CliError(RuntimeError):
    pass


# -- helpers --------------------------------------------------------------------

def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _write_csv(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=fields)
        wr.writeheader()
        wr.writerows(rows)
    return path


def _load_config(args) -> cfgmod.RunConfig:
    if getattr(args, "config", None):
        cfg = cfgmod.load(args.config)
    elif getattr(args, "preset", None):
        cfg = cfgmod.preset(args.preset)
    else:
        raise CliError("either --config or --preset is required")
    over = {}
    if args.threads is not None:
        over["threads"] = args.threads
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = str(args.out)
    if over:
        cfg = cfg.with_overrides(**over)
    return cfg


def _out(args, cfg: cfgmod.RunConfig | None = None) -> Path:
    if args.out is not None:
        return Path(args.out)
    return cfg.out if cfg is not None else Path("out")


def _arch_for(cfg: cfgmod.RunConfig, ds: data.Dataset) -> ArchSpec:
    return cfgmod.build_arch(cfg.arch_dict, ds.grid.extents, ds.channels)


def _on_grid(ds: data.Dataset, grid: Grid) -> data.Dataset:
    """Re-label a dataset with the architecture's boundary handling."""
    if ds.grid == grid:
        return ds
    if ds.grid.extents != grid.extents:
        raise CliError(f"dataset grid {ds.grid.extents} does not match architecture {grid.extents}")
    return data.Dataset(grid, ds.values, ds.labels, ds.meta)


def _threads(args) -> int:
    return args.threads if args.threads is not None else 1


# -- data -------------------------------------------------------------------------

def prepare_data(cfg: cfgmod.RunConfig) -> tuple[data.Dataset, data.Dataset]:
    """Load or generate train/test sets and apply the configured preprocessing."""
    d = cfg.data
    src = d["source"]
    boundary = cfg.arch_dict.get("boundary", "periodic")
    n_tr, n_te = int(d["n_train"]), int(d["n_test"])
    if src == "cifar10":
        root = cfg.data_root()
        if root is None:
            raise CliError(f"CIFAR-10 location unknown: set data.root or ${cfgmod.DATA_ENV}")
        train = data.load_cifar10(root, "train", n_tr, boundary)
        test = data.load_cifar10(root, "test", n_te, boundary)
        f = int(d.get("downsample", 1))
        train, test = data.downsample(train, f), data.downsample(test, f)
    elif src == "noise":
        g = Grid((int(d["height"]), int(d["width"])), boundary)
        ch = int(d.get("channels", 3))
        train = data.labeled_noise(n_tr, g, ch, cfg.seed)
        test = data.labeled_noise(n_te, g, ch, cfg.seed + 1)
    elif src == "spheres":
        train = data.gen_product_of_spheres(int(d["n_positions"]), int(d["d"]), n_tr, cfg.seed)
        test = data.gen_product_of_spheres(int(d["n_positions"]), int(d["d"]), n_te, cfg.seed + 1)
    else:
        raise CliError(f"unknown data source {src!r}")
    z = d.get("zca") or {}
    if z.get("enabled", False) and train.grid.rank == 2:
        patch = z.get("patch") or cfg.arch_dict["layers"][0].get("patch", 3)
        shape = cfgmod.build_patch(patch, train.grid.rank, "data.zca.patch")
        t = data.fit_zca(train, shape, z.get("eps"), z.get("mode", "patch"))
        train, test = data.apply_zca(train, t), data.apply_zca(test, t)
    return train, test


def cmd_data(args) -> int:
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    if args.action == "gen":
        ds = data.gen_product_of_spheres(args.n_positions, args.d, args.n, args.seed or 0)
        p = out / (args.name or "spheres.ckd")
        data.save_dataset(p, ds)
        print(p)
        return 0
    cfg = _load_config(args)
    train, test = prepare_data(cfg)
    for name, ds in (("train", train), ("test", test)):
        p = out / f"{name}.ckd"
        data.save_dataset(p, ds)
        print(f"{p} n={len(ds)} fingerprint={ds.fingerprint:016x}")
    return 0


# -- gram ------------------------------------------------------------------------

def _save_cross(path: Path, cg: gram.CrossGram):
    np.savez(path, K=cg.K, fps=np.array([cg.arch_fp, cg.train_fp, cg.test_fp], dtype=np.uint64))


def _load_cross(path: Path) -> gram.CrossGram:
    with np.load(path) as z:
        a, tr, te = (int(v) for v in z["fps"])
        return gram.CrossGram(z["K"], a, tr, te)


def cmd_gram(args) -> int:
    out = _out(args)
    if args.action in ("compute", "cross"):
        cfg = _load_config(args)
        ds = data.load_dataset(args.data)
        arch = _arch_for(cfg, ds)
        ds = _on_grid(ds, arch.grid)
        if args.action == "compute":
            out.mkdir(parents=True, exist_ok=True)
            path = Path(args.gram) if args.gram else out / "gram.ckg"
            t0 = time.perf_counter()
            g = gram.compute_gram(arch, ds, tile_size=args.tile or cfg.tile,
                                  workers=_threads(args), path=path)
            print(f"{path} n={g.n} seconds={time.perf_counter() - t0:.2f}")
        else:
            test = _on_grid(data.load_dataset(args.test), arch.grid)
            cg = gram.cross_gram(arch, ds, test, workers=_threads(args))
            out.mkdir(parents=True, exist_ok=True)
            path = out / "cross.npz"
            _save_cross(path, cg)
            print(f"{path} shape={cg.K.shape}")
        return 0
    g = gram.read_gram(args.gram)
    if args.action == "eig":
        ev = gram.eigen_decay(g, args.top)
        rows = [{"rank": i, "eigenvalue": repr(float(v)), "normalized": repr(float(v) / g.n)}
                for i, v in enumerate(ev)]
        print(_write_csv(out / "eigen.csv", rows))
        return 0
    report = gram.verify_gram(g)
    print(json.dumps(report, sort_keys=True))
    return 0 if report["ok"] else 1


# -- krr -------------------------------------------------------------------------

def cmd_krr(args) -> int:
    out = _out(args)
    if args.action == "fit":
        g = gram.read_gram(args.gram)
        ds = data.load_dataset(args.data)
        if ds.labels is None:
            raise CliError("training set has no labels")
        m = krr.fit_onevsall(g, ds.labels, args.lam)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "model.ckk"
        krr.save_model(path, m)
        print(f"{path} residual={m.residual:.3e}")
        return 0
    model = krr.load_model(args.model)
    cg = _load_cross(Path(args.cross))
    pred = krr.classify(model, cg)
    if args.action == "predict":
        out.mkdir(parents=True, exist_ok=True)
        np.save(out / "predictions.npy", pred)
        print(out / "predictions.npy")
        return 0
    ds = data.load_dataset(args.data)
    metrics = {"accuracy": krr.accuracy(pred, ds.labels),
               "per_class_accuracy": krr.per_class_accuracy(pred, ds.labels, model.classes)}
    print(_write_json(out / "metrics.json", metrics))
    return 0


# -- theory ----------------------------------------------------------------------

def cmd_theory(args) -> int:
    out = _out(args)
    seed = args.seed or 0
    if args.action == "spectrum":
        rows = []
        for h in ("dirac", "average", "gaussian"):
            r = verify.spectrum_experiment(h, n=args.n, n_positions=args.n_positions, seed=seed)
            for i, (p, e) in enumerate(zip(r["predicted"], r["empirical"])):
                rows.append({"filter": h, "rank": i, "predicted": repr(p), "empirical": repr(e)})
        print(_write_csv(out / "spectrum.csv", rows))
    elif args.action == "bounds":
        rows = verify.bounds_experiment(n_positions=args.n_positions, n=args.n, seed=seed)
        exps = theory.table_bound_exponents()
        for r, e in zip(rows, exps):
            r["bound_exponent"] = e
        print(_write_csv(out / "bounds.csv", rows))
    else:
        rows, ratios = theory.pooling_study(n_positions=tuple(args.positions),
                                            seeds=range(seed, seed + args.seeds),
                                            n_test=args.n_test)
        _write_csv(out / "curves.csv", rows)
        _write_json(out / "ratios.json", {str(k): v for k, v in ratios.items()})
        print(out / "curves.csv")
    return 0


# -- verify ----------------------------------------------------------------------

def cmd_verify(args) -> int:
    out = _out(args)
    names = verify.SUITES if args.suite == "all" else (args.suite,)
    verdicts = []
    for name in names:
        kw = {}
        if name == "spectrum":
            kw["n"] = args.n
        if name == "oracle":
            kw["n_cases"] = args.cases
        t0 = time.perf_counter()
        v = verify.run_suite(name, seed=args.seed or 0, out=out,
                             inject_fault=args.inject_fault, **kw)
        v["seconds"] = time.perf_counter() - t0
        verdicts.append(v)
        _write_json(out / f"verify_{name}.json", v)
        print(json.dumps({"suite": name, "passed": v["passed"]}))
    return 0 if all(v["passed"] for v in verdicts) else 1


# -- figures ---------------------------------------------------------------------

def epq_grid(n: int = 20, p: int = 4, q: int = 0, s: int = 2, signal: str = "dirac",
             at: int = 0) -> np.ndarray:
    """E_pq(x) for a Dirac at position ``at`` or a constant input, h1 Gaussian of radius s."""
    h1 = gaussian_filter(s, stride=1)
    x = np.zeros(n)
    if signal == "dirac":
        x[at] = 1.0
    else:
        x[:] = 1.0
    return featoracle.e_pq_apply(h1, p, q, x)


def epq_rows(n: int = 20, p: int = 4, q: int = 0, s: int = 2, signal: str = "dirac") -> list[dict]:
    """Full response grid, one row per (a, b)."""
    E = epq_grid(n, p, q, s, signal)
    return [{"p": p, "q": q, "a": a, "b": b, "value": repr(float(E[a, b]))}
            for a in range(n) for b in range(n)]


def decay_rows(ds: data.Dataset, presets, top: int = 200, threads: int = 1) -> list[dict]:
    """Normalized Gram eigenvalues of each preset architecture on one dataset."""
    rows = []
    for name in presets:
        arch = cfgmod.build_arch(cfgmod.PRESETS[name], ds.grid.extents, ds.channels)
        g = gram.compute_gram(arch, _on_grid(ds, arch.grid), workers=threads)
        ev = gram.eigen_decay(g, top) / len(ds)
        rows += [{"arch": name, "rank": i, "eigenvalue": repr(float(v))} for i, v in enumerate(ev)]
    return rows


def cmd_figures(args) -> int:
    out = _out(args)
    if args.action == "epq":
        rows = epq_rows(args.n, args.p, args.q, args.s, signal=args.signal)
        print(_write_csv(out / f"epq_{args.signal}_p{args.p}_q{args.q}.csv", rows))
    elif args.action == "decay":
        if args.gram:
            ev = gram.eigen_decay(gram.read_gram(args.gram), args.top)
            rows = [{"rank": i, "eigenvalue": repr(float(v))} for i, v in enumerate(ev)]
        elif args.data:
            rows = decay_rows(data.load_dataset(args.data), args.archs, args.top, _threads(args))
        else:
            rows = []
            for h in ("dirac", "average", "gaussian"):
                r = verify.spectrum_experiment(h, n=args.n, seed=args.seed or 0, top=args.top)
                rows += [{"filter": h, "rank": i, "eigenvalue": repr(e)}
                         for i, e in enumerate(r["empirical"])]
        print(_write_csv(out / "decay.csv", rows))
    else:
        with open(args.curves) as f:
            rows = list(csv.DictReader(f))
        for r in rows:
            r["n"], r["excess_risk"] = int(r["n"]), float(r["excess_risk"])
        summary = []
        for npos in sorted({r.get("n_positions", "") for r in rows}):
            part = [r for r in rows if r.get("n_positions", "") == npos]
            for name in sorted({r["arch"] for r in part}):
                ns, mu, sd = theory.mean_curve(part, name)
                summary += [{"n_positions": npos, "arch": name, "n": int(a), "mean": repr(float(b)),
                             "std": repr(float(c))} for a, b, c in zip(ns, mu, sd)]
        print(_write_csv(out / "curves_summary.csv", summary))
    return 0


# -- pipeline ----------------------------------------------------------------------

METRICS_SCHEMA = 1


class StageError(RuntimeError):
    """A module error tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, err: Exception):
        super().__init__(f"[{stage}] {type(err).__name__}: {err}")
        self.stage = stage


@contextlib.contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e
    timings[name] = time.perf_counter() - t0


def run_pipeline(cfg: cfgmod.RunConfig) -> dict:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    timings = {}
    with _stage("data", timings):
        train, test = prepare_data(cfg)
        if train.labels is None:
            raise CliError("pipeline needs a labeled data source")
        arch = _arch_for(cfg, train)
        train, test = _on_grid(train, arch.grid), _on_grid(test, arch.grid)
    with _stage("gram", timings):
        g = gram.compute_gram(arch, train, tile_size=cfg.tile, workers=cfg.threads,
                              path=out / "gram.ckg")
    with _stage("cross_gram", timings):
        cg = gram.cross_gram(arch, train, test, workers=cfg.threads)
    with _stage("krr", timings):
        k = cfg.raw["krr"]
        model = krr.fit_onevsall(g, train.labels, cfg.lam, pos=float(k["pos"]), neg=float(k["neg"]))
        krr.save_model(out / "model.ckk", model)
        pred = krr.classify(model, cg)
    metrics = {"schema_version": METRICS_SCHEMA, "name": cfg.raw["name"],
               "n_train": len(train), "n_test": len(test),
               "arch_fingerprint": f"{arch.fingerprint:016x}",
               "accuracy": krr.accuracy(pred, test.labels),
               "per_class_accuracy": krr.per_class_accuracy(pred, test.labels, model.classes),
               "krr_residual": model.residual, "gram_psd_margin": gram.psd_margin(g.K),
               "timings": timings}
    _write_json(out / "metrics.json", metrics)
    return metrics


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    m = run_pipeline(cfg)
    print(json.dumps({"accuracy": m["accuracy"], "out": str(cfg.out)}))
    return 0


# -- parser ------------------------------------------------------------------------

def _cfg_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--config", help="YAML run configuration")
    g.add_argument("--preset", choices=sorted(cfgmod.PRESETS))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand without clobbering
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="convkern", parents=[common],
                                 description="Convolutional kernels on signals: Gram matrices, KRR and checks.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data", parents=[common], help="prepare or generate datasets")
    p.add_argument("action", choices=("prep", "gen"))
    _cfg_args(p)
    p.add_argument("--n-positions", type=int, default=4)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--name")
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("gram", parents=[common], help="Gram matrices")
    p.add_argument("action", choices=("compute", "eig", "verify", "cross"))
    _cfg_args(p)
    p.add_argument("--data", help="training dataset cache")
    p.add_argument("--test", help="test dataset cache (cross)")
    p.add_argument("--gram", help="Gram file")
    p.add_argument("--tile", type=int)
    p.add_argument("--top", type=int, default=50)
    p.set_defaults(func=cmd_gram)

    p = sub.add_parser("krr", parents=[common], help="kernel ridge regression")
    p.add_argument("action", choices=("fit", "predict", "eval"))
    p.add_argument("--gram")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--cross")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-8)
    p.set_defaults(func=cmd_krr)

    p = sub.add_parser("theory", parents=[common], help="spectrum, bounds and learning curves")
    p.add_argument("action", choices=("spectrum", "bounds", "curves"))
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--n-positions", type=int, default=4)
    p.add_argument("--positions", type=int, nargs="+", default=[4, 8, 16])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--n-test", type=int, default=1000)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("verify", parents=[common], help="run property suites")
    p.add_argument("suite", choices=verify.SUITES + ("all",))
    p.add_argument("--inject-fault", action="store_true", help="perturb one value to test the harness")
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--cases", type=int, default=50)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("figures", parents=[common], help="plot-ready CSV files")
    p.add_argument("action", choices=("epq", "decay", "curves"))
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--p", type=int, default=4)
    p.add_argument("--q", type=int, default=0)
    p.add_argument("--s", type=int, default=2)
    p.add_argument("--data", help="dataset cache for decay (compares --archs)")
    p.add_argument("--archs", nargs="+", default=["exp-exp-strided", "exp-exp-2layer"],
                   choices=sorted(cfgmod.PRESETS))
    p.add_argument("--signal", choices=("dirac", "constant"), default="dirac")
    p.add_argument("--gram")
    p.add_argument("--top", type=int, default=50)
    p.add_argument("--curves", default="curves.csv")
    p.set_defaults(func=cmd_figures)

    p = sub.add_parser("pipeline", parents=[common], help="data, Gram, KRR and metrics in one go")
    _cfg_args(p)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("threads", "seed", "out", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, StageError, cfgmod.ConfigError, FileNotFoundError, gram.GramFormatError,
            gram.FingerprintMismatch, ValueError) as e:
        print(f"convkern: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (partial results are still
written and flagged), 2 invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .analyzer import measure_rates, optimal_cache_fraction, sweep
from .core import RateSpec, SizeModel, make_dataset
from .config import RunConfig
from .errors import ConfigError, CoordLoadError
from .harness import run_scenario, with_overrides, write_results

log = logging.getLogger("coordload")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _csv(rows, columns=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns or list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _load(args) -> RunConfig | None:
    if not getattr(args, "config", None):
        return None
    cfg = RunConfig.load(args.config)
    return with_overrides(cfg, getattr(args, "seed", None), getattr(args, "clock", None))


# subcommands -----------------------------------------------------------------

def cmd_run(args) -> int:
    if not args.config:
        raise ConfigError("run needs --config")
    cfg = _load(args)
    result = run_scenario(cfg)
    paths = write_results(result, args.out_dir, figures=not args.no_figures)
    summary = result.summary()
    print(json.dumps({k: summary[k] for k in summary if k != "variants"}, indent=2, sort_keys=True))
    for name, p in sorted(paths.items()):
        log.info("wrote %s: %s", name, p)
    if result.failed:
        print("run failed; partial results written to", args.out_dir, file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _rates_from_args(args) -> tuple[RateSpec, float]:
    cfg = _load(args)
    base = cfg.rates.to_dict() if cfg else {}
    for flag, key in (("G", "gpu_rate_G"), ("P", "prep_rate_P"), ("C", "cache_rate_C"),
                      ("S", "storage_rate_S")):
        v = getattr(args, flag)
        if v is not None:
            base[key] = v
    missing = [k for k in ("gpu_rate_G", "prep_rate_P", "cache_rate_C", "storage_rate_S") if k not in base]
    if missing:
        raise ConfigError(f"missing rates {missing}; pass --G/--P/--C/--S or --config")
    D = args.D if args.D is not None else (cfg.dataset.n_items if cfg else 1.0)
    return RateSpec.from_dict(base), float(D)


def cmd_predict(args) -> int:
    from .experiments import relative_error, simulate_at_fraction

    rates, D = _rates_from_args(args)
    try:
        preds = sweep(rates, D, args.step)
        sizing = optimal_cache_fraction(rates, D, args.step)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    rows = []
    for p in preds:
        row = p.to_row()
        row["x_star"] = p.cache_fraction_x == sizing.x
        row["note"] = ""
        if row["x_star"]:
            row["note"] = "fetch stalls eliminated" if sizing.eliminates_fetch_stalls else \
                "fetch stalls remain even fully cached"
        if args.verify:
            rep = simulate_at_fraction(rates, int(D), p.cache_fraction_x, args.batch_size, args.seed or 0)
            row["simulated_throughput"] = rep.steady_throughput_samples_per_s
            row["relative_error"] = relative_error(row["simulated_throughput"], p.throughput)
        rows.append(row)
    text = _csv(rows)
    sys.stdout.write(text)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "prediction.csv").write_text(text)
        (out / "prediction.json").write_text(json.dumps(
            {"rates": rates.to_dict(), "D": D, "x_star": sizing.x,
             "eliminates_fetch_stalls": sizing.eliminates_fetch_stalls, "rows": rows},
            indent=2, sort_keys=True) + "\n")
        if not args.no_figures:
            from .plotting import fetch_rate_curve

            fetch_rate_curve(rows, out / "fetch_rate.png", x_star=sizing.x)
    return EXIT_OK


def cmd_compare_caches(args) -> int:
    from .experiments import compare_policies, micro_example

    cfg = _load(args)
    n = args.n_items or (cfg.dataset.n_items if cfg else 1000)
    if args.capacity is not None:
        cap = args.capacity
    else:
        frac = args.capacity_fraction
        if frac is None:
            frac = cfg.cache.capacity_fraction if cfg and cfg.cache.capacity_fraction is not None else 0.35
        cap = int(round(frac * n))
    if not 0 <= cap <= n:
        raise ConfigError(f"capacity must lie in [0, {n}], got {cap}")
    epochs = args.epochs or (cfg.epochs if cfg else 5)
    seeds = args.seeds if args.seeds else [cfg.seed if cfg else 0]
    rows = []
    per_seed = {}
    for s in seeds:
        cmp_ = compare_policies(n, cap, epochs, s)
        rows.extend(cmp_.rows())
        per_seed[s] = cmp_
    text = _csv(rows)
    sys.stdout.write(text)
    micro = micro_example(4, 2)
    print(f"# micro-example N=4 cap=2: MinIO misses/epoch {sorted(micro.minio_misses)}, "
          f"LRU misses/epoch {micro.lru_min}..{micro.lru_max}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cache_misses.csv").write_text(text)
        (out / "micro_example.json").write_text(json.dumps(micro.to_dict(), indent=2, sort_keys=True) + "\n")
        if not args.no_figures:
            from .plotting import miss_comparison

            first = per_seed[seeds[0]]
            miss_comparison({"MinIO": first.minio, "LRU": first.lru}, out / "cache_misses.png",
                            title=f"N={n}, capacity={cap}, seed={seeds[0]}")
    return EXIT_OK


def cmd_measure(args) -> int:
    if not args.config:
        raise ConfigError("measure needs --config")
    cfg = _load(args)
    ds = cfg.dataset.build(cfg.seed)
    est = measure_rates(cfg.pipeline_config(ds), args.iterations, args.cache_fraction)
    text = json.dumps(est.to_dict(), indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "rates.json").write_text(text)
    return EXIT_OK


def _parse_size(spec: str) -> SizeModel:
    kind, *vals = spec.split(":")
    try:
        if kind == "fixed":
            return SizeModel.fixed(int(vals[0]))
        if kind == "uniform":
            return SizeModel.uniform(int(vals[0]), int(vals[1]))
        if kind == "lognormal":
            return SizeModel.lognormal(float(vals[0]), float(vals[1]))
    except (IndexError, ValueError):
        pass
    raise ConfigError(f"bad --size {spec!r}; use fixed:B, uniform:LO:HI or lognormal:MU:SIGMA")


def cmd_gen_dataset(args) -> int:
    cfg = _load(args)
    if cfg is not None:
        ds = cfg.dataset.build(cfg.seed)
    else:
        if not args.n_items:
            raise ConfigError("gen-dataset needs --n-items or --config")
        ds = make_dataset(args.n_items, _parse_size(args.size), args.seed or 0)
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.json"
    path.write_text(ds.to_json())
    print(f"{path}: {ds.n_items} items, {ds.total_bytes} bytes")
    return EXIT_OK


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--out-dir", help="directory for result files")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--clock", choices=["virtual", "wall"], help="override the config clock")
    common.add_argument("--no-figures", action="store_true", help="skip PNG output")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="coordload", description="Input-pipeline stall analysis and "
                                "coordinated data loading experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run a scenario from a config file")
    r.set_defaults(func=cmd_run, out_dir="results")

    pr = sub.add_parser("predict", parents=[common], help="fetch-rate / throughput sweep over cache size")
    for flag in ("G", "P", "C", "S"):
        pr.add_argument(f"--{flag}", type=float, help=f"rate {flag} in samples/s")
    pr.add_argument("--D", type=float, help="dataset size in samples")
    pr.add_argument("--step", type=float, default=0.05, help="cache fraction grid step")
    pr.add_argument("--verify", action="store_true", help="re-run each row in the simulator")
    pr.add_argument("--batch-size", type=int, default=50)
    pr.set_defaults(func=cmd_predict)

    cc = sub.add_parser("compare-caches", parents=[common], help="MinIO vs LRU misses per epoch")
    cc.add_argument("--n-items", type=int)
    cc.add_argument("--capacity", type=int, help="capacity in items")
    cc.add_argument("--capacity-fraction", type=float)
    cc.add_argument("--epochs", type=int)
    cc.add_argument("--seeds", type=int, nargs="+")
    cc.set_defaults(func=cmd_compare_caches)

    m = sub.add_parser("measure", parents=[common], help="differential rate measurement")
    m.add_argument("--iterations", type=int, default=100)
    m.add_argument("--cache-fraction", type=float, default=0.0)
    m.set_defaults(func=cmd_measure)

    g = sub.add_parser("gen-dataset", parents=[common], help="write a synthetic dataset manifest")
    g.add_argument("--n-items", type=int)
    g.add_argument("--size", default="fixed:1024", help="fixed:B | uniform:LO:HI | lognormal:MU:SIGMA")
    g.set_defaults(func=cmd_gen_dataset)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CoordLoadError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

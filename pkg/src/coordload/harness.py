"""Scenario orchestration: run a RunConfig (and its baseline) and write reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .cache import STAT_COLUMNS, Policy, make_cache
from .config import RunConfig
from .core import Dataset
from .dist import PartitionedCluster
from .pipeline import REPORT_COLUMNS, StallReport, run_epochs
from .staging import HPSearchRunner, simulate_hp_search

log = logging.getLogger(__name__)

STALL_FILE = "stall_reports.csv"
CACHE_FILE = "cache_stats.csv"
LEDGER_FILE = "staging_ledger.jsonl"
SUMMARY_FILE = "summary.json"
FIGURE_FILE = "stalls.png"

# which toggle each mode compares, and the variant names for on / off
_VARIANTS = {
    "single": ("minio_on", "minio", "lru"),
    "distributed": ("partitioned_on", "partitioned", "isolated"),
    "hp_search": ("coord_prep_on", "coordinated", "uncoordinated"),
}


@dataclass
class VariantResult:
    name: str
    reports: list[StallReport] = field(default_factory=list)
    cache_rows: list[dict] = field(default_factory=list)
    ledger: list[dict] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    prep_ops: list[int] = field(default_factory=list)
    storage_reads: list[int] = field(default_factory=list)
    misses: list[int] = field(default_factory=list)
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error) or any(r.failed for r in self.reports)

    def measured(self, values):
        # epoch 0 is warmup
        return values[1:]

    def mean_measured_epoch_seconds(self) -> float:
        xs = self.measured(self.epoch_seconds)
        return sum(xs) / len(xs) if xs else math.nan


@dataclass
class ScenarioResult:
    config: RunConfig
    primary: VariantResult
    baseline: VariantResult | None = None

    @property
    def variants(self) -> list[VariantResult]:
        return [v for v in (self.primary, self.baseline) if v is not None]

    @property
    def failed(self) -> bool:
        return any(v.failed for v in self.variants)

    def summary(self) -> dict:
        cfg = self.config
        out = {
            "mode": cfg.mode.kind,
            "seed": cfg.seed,
            "clock": cfg.clock,
            "epochs": cfg.epochs,
            "n_items": cfg.dataset.n_items,
            "failed": self.failed,
            "primary": self.primary.name,
            "baseline": self.baseline.name if self.baseline else None,
            "variants": {},
        }
        for v in self.variants:
            out["variants"][v.name] = {
                "failed": v.failed,
                "error": v.error,
                "epoch_seconds": [_r(x) for x in v.epoch_seconds],
                "mean_measured_epoch_seconds": _r(v.mean_measured_epoch_seconds()),
                "prep_ops": v.prep_ops,
                "storage_reads": v.storage_reads,
                "misses": v.misses,
            }
        if self.baseline is not None and not self.failed:
            p, b = self.primary, self.baseline
            out["speedup_vs_baseline"] = _r(_ratio(b.mean_measured_epoch_seconds(),
                                                   p.mean_measured_epoch_seconds()))
            if cfg.mode.kind == "single":
                by = {v.name: sum(v.measured(v.misses)) for v in self.variants}
                out["miss_count_ratio_lru_over_minio"] = _r(_ratio(by["lru"], by["minio"]))
            elif cfg.mode.kind == "hp_search":
                by = {v.name: sum(v.prep_ops) for v in self.variants}
                out["prep_op_ratio_uncoordinated_over_coordinated"] = _r(
                    _ratio(by["uncoordinated"], by["coordinated"]))
        return out


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return math.inf if a > 0 else math.nan
    return a / b


def _r(x: float):
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return float(f"{x:.9g}")


# per-mode runners ------------------------------------------------------------

def _run_single(cfg: RunConfig, dataset: Dataset, name: str, minio: bool) -> VariantResult:
    pcfg = cfg.pipeline_config(dataset, Policy.MINIO if minio else Policy.LRU)
    cache = make_cache(pcfg.cache)
    res = VariantResult(name)
    res.reports = run_epochs(dataset, pcfg, cfg.epochs, cfg.seed, cache=cache, clock=cfg.clock)
    res.epoch_seconds = [r.epoch_seconds for r in res.reports]
    res.prep_ops = [r.prep_ops for r in res.reports]
    res.storage_reads = [r.storage_reads for r in res.reports]
    res.misses = [cache.stats.epoch(e).misses for e in range(cfg.epochs)]
    res.cache_rows = cache.stats.rows(variant=name, server=0)
    return res


def _run_distributed(cfg: RunConfig, dataset: Dataset, name: str, partitioned: bool) -> VariantResult:
    # capacity is per server
    pcfg = cfg.pipeline_config(dataset, Policy.MINIO)
    res = VariantResult(name)
    cluster = PartitionedCluster(dataset, cfg.mode.n_servers, pcfg.cache.capacity_bytes, pcfg,
                                 cfg.seed, partitioned=partitioned, clock=cfg.clock)
    with cluster:
        for e in range(cfg.epochs):
            ce = cluster.run_epoch(e)
            res.reports.extend(ce.reports)
            res.epoch_seconds.append(ce.epoch_seconds)
            res.storage_reads.append(ce.storage_reads)
            res.prep_ops.append(sum(r.prep_ops for r in ce.reports))
            res.misses.append(sum(n.cache.stats.epoch(e).misses for n in cluster.nodes))
    for node in cluster.nodes:
        res.cache_rows.extend(node.cache.stats.rows(variant=name, server=node.server_id))
    return res


def _run_hp(cfg: RunConfig, dataset: Dataset, name: str, coordinated: bool) -> VariantResult:
    pcfg = cfg.pipeline_config(dataset)
    res = VariantResult(name)
    n_jobs = cfg.mode.n_jobs
    if cfg.clock == "virtual":
        cache = make_cache(pcfg.cache)
        for ep in simulate_hp_search(dataset, pcfg, n_jobs, cfg.epochs, cfg.seed,
                                     coordinated=coordinated, cache=cache):
            res.reports.extend(ep.reports)
            res.epoch_seconds.append(ep.epoch_seconds)
            res.prep_ops.append(ep.prep_ops)
            res.storage_reads.append(sum(r.storage_reads for r in ep.reports))
            res.misses.append(cache.stats.epoch(ep.epoch).misses)
            res.ledger.extend({"variant": name, **row} for row in ep.ledger)
        res.cache_rows = cache.stats.rows(variant=name, server=0)
        return res

    # wall clock: threads with real sleeps; each job owns a 1/n_jobs share of prep
    r = pcfg.rates
    n_batches = math.ceil(dataset.n_items / cfg.batch_size)
    iteration = cfg.batch_size / r.G
    prep = cfg.batch_size * n_jobs / r.P
    runner = HPSearchRunner(n_jobs, n_batches, iteration_seconds=iteration, batch_prep_seconds=prep,
                            coordinated=coordinated, queue_depth=cfg.queue_depth,
                            timeout_factor=cfg.hp.timeout_factor)
    for ep in runner.run(cfg.epochs):
        compute = n_batches * iteration
        res.reports.append(StallReport(
            epoch_index=ep.epoch, compute_seconds=compute, fetch_stall_seconds=0.0,
            prep_stall_seconds=max(0.0, ep.epoch_seconds - compute),
            epoch_seconds=ep.epoch_seconds, samples_processed=dataset.n_items,
            throughput_samples_per_s=dataset.n_items / ep.epoch_seconds, prep_ops=ep.prep_ops,
            failed=ep.aborted is not None, error=ep.aborted or ""))
        res.epoch_seconds.append(ep.epoch_seconds)
        res.prep_ops.append(ep.prep_ops)
        res.storage_reads.append(0)
        res.misses.append(0)
        res.ledger.extend({"variant": name, **row} for row in ep.ledger)
    return res


_RUNNERS = {"single": _run_single, "distributed": _run_distributed, "hp_search": _run_hp}


def run_scenario(cfg: RunConfig) -> ScenarioResult:
    """Run the configured variant, then the baseline (toggle flipped) if requested.

    A runtime failure in one variant is recorded on it instead of raised, so
    whatever finished can still be written out.
    """
    dataset = cfg.dataset.build(cfg.seed)
    toggle, on_name, off_name = _VARIANTS[cfg.mode.kind]
    on = getattr(cfg.toggles, toggle)
    runner = _RUNNERS[cfg.mode.kind]

    def attempt(name, flag):
        try:
            return runner(cfg, dataset, name, flag)
        except Exception as e:  # reported, not swallowed: the CLI exits 1
            log.exception("variant %s failed", name)
            return VariantResult(name, error=f"{type(e).__name__}: {e}")

    primary = attempt(on_name if on else off_name, on)
    baseline = attempt(off_name if on else on_name, not on) if cfg.baseline else None
    return ScenarioResult(cfg, primary, baseline)


# report files ------------------------------------------------------------------

def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def stall_rows(result: ScenarioResult) -> list[dict]:
    rows = []
    for v in result.variants:
        for rep in v.reports:
            row = {k: (_r(x) if isinstance(x, float) else x) for k, x in rep.to_row().items()}
            rows.append({"variant": v.name, **row})
    return rows


def write_results(result: ScenarioResult, out_dir: str | Path, figures: bool = True) -> dict[str, Path]:
    """Write CSV/JSON(L) reports (and a stall figure) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    rows = stall_rows(result)
    paths["stalls"] = out / STALL_FILE
    paths["stalls"].write_text(_csv(rows, ["variant"] + REPORT_COLUMNS))

    cache_rows = [row for v in result.variants for row in v.cache_rows]
    paths["cache"] = out / CACHE_FILE
    paths["cache"].write_text(_csv(cache_rows, ["variant", "server"] + STAT_COLUMNS))

    if result.config.mode.kind == "hp_search":
        paths["ledger"] = out / LEDGER_FILE
        with paths["ledger"].open("w") as fh:
            for v in result.variants:
                for row in v.ledger:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")

    paths["summary"] = out / SUMMARY_FILE
    paths["summary"].write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")

    (out / "config.yaml").write_text(result.config.dumps())
    paths["config"] = out / "config.yaml"

    if figures and rows:
        from .plotting import stall_breakdown

        # one bar per (variant, epoch): sum over servers / jobs
        agg: dict = {}
        for row in rows:
            key = (row["variant"], row["epoch_index"])
            a = agg.setdefault(key, {"variant": key[0], "epoch_index": key[1], "compute_seconds": 0.0,
                                     "fetch_stall_seconds": 0.0, "prep_stall_seconds": 0.0, "n": 0})
            for k in ("compute_seconds", "fetch_stall_seconds", "prep_stall_seconds"):
                a[k] += row[k]
            a["n"] += 1
        bars = [{**a, **{k: a[k] / a["n"] for k in ("compute_seconds", "fetch_stall_seconds",
                                                       "prep_stall_seconds")}}
                for a in agg.values()]
        paths["figure"] = stall_breakdown(bars, out / FIGURE_FILE,
                                          title=f"{result.config.mode.kind}: time per epoch")
    return paths


def with_overrides(cfg: RunConfig, seed: int | None = None, clock: str | None = None) -> RunConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if clock is not None:
        changes["clock"] = clock
    return replace(cfg, **changes) if changes else cfg

"""What-if model over pipeline rates, and differential rate measurement.

The fetch model treats cached and uncached reads as serialized: reading a
dataset of ``D`` samples with a fraction ``x`` cached takes
``D*x/C + D*(1-x)/S`` seconds.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace

from .core import RateSpec
from .errors import MeasurementError
from .pipeline import PipelineConfig, measure_phase

# fully-cached runs may exceed synthetic ones by this much before we call it noise
CONSISTENCY_TOLERANCE = 0.02


class Bottleneck(str, enum.Enum):
    IO_BOUND = "io_bound"
    CPU_BOUND = "cpu_bound"
    GPU_BOUND = "gpu_bound"


@dataclass(frozen=True)
class Prediction:
    cache_fraction_x: float
    T_f_seconds: float
    F: float
    P: float
    G: float
    throughput: float
    bottleneck: Bottleneck

    @property
    def fetch_stall_free(self) -> bool:
        return self.F >= min(self.P, self.G)

    def to_row(self) -> dict:
        row = asdict(self)
        row["bottleneck"] = self.bottleneck.value
        return row


def predict_fetch_rate(D: float, x: float, C: float, S: float) -> tuple[float, float]:
    """Return ``(T_f, F)``: time to read the dataset once, and the fetch rate."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"cache fraction must lie in [0, 1], got {x}")
    if not (C > 0 and S > 0):
        raise ValueError("C and S must be positive")
    T_f = D * x / C + D * (1.0 - x) / S
    return T_f, D / T_f


def classify(F: float, P: float, G: float) -> Bottleneck:
    # a stall needs G strictly above min(F, P)
    if G <= min(F, P):
        return Bottleneck.GPU_BOUND
    return Bottleneck.IO_BOUND if F < P else Bottleneck.CPU_BOUND


def predict_throughput(rates: RateSpec, D: float, x: float) -> Prediction:
    T_f, F = predict_fetch_rate(D, x, rates.C, rates.S)
    return Prediction(x, T_f, F, rates.P, rates.G, min(F, rates.P, rates.G),
                      classify(F, rates.P, rates.G))


def cache_grid(step: float) -> list[float]:
    n = int(round(1.0 / step))
    grid = [round(i * step, 10) for i in range(n + 1) if i * step < 1.0 - 1e-12]
    return grid + [1.0]


def sweep(rates: RateSpec, D: float, step: float = 0.05) -> list[Prediction]:
    return [predict_throughput(rates, D, x) for x in cache_grid(step)]


@dataclass(frozen=True)
class CacheSizing:
    x: float
    eliminates_fetch_stalls: bool
    target_rate: float

    @property
    def flagged(self) -> bool:
        return not self.eliminates_fetch_stalls


def optimal_cache_fraction(rates: RateSpec, D: float, grid_step: float = 0.05) -> CacheSizing:
    """Smallest grid cache fraction whose fetch rate keeps up with min(P, G).

    If even a fully cached dataset is too slow (C < min(P, G)) the result is
    ``x=1.0`` with ``eliminates_fetch_stalls=False``.
    """
    if not 0.0 < grid_step <= 0.1:
        raise ValueError(f"grid_step must be in (0, 0.1], got {grid_step}")
    target = min(rates.P, rates.G)
    for x in cache_grid(grid_step):
        _, F = predict_fetch_rate(D, x, rates.C, rates.S)
        if F >= target:
            return CacheSizing(x, True, target)
    return CacheSizing(1.0, False, target)


def break_even_fraction(rates: RateSpec, target: float) -> float:
    """Exact cache fraction at which F equals ``target`` (may fall outside [0, 1])."""
    # 1/target = x/C + (1-x)/S  =>  x = (1/S - 1/target) / (1/S - 1/C)
    return (1.0 / rates.S - 1.0 / target) / (1.0 / rates.S - 1.0 / rates.C)


@dataclass
class RateEstimate:
    G: float
    P: float
    C: float
    S: float
    p_is_lower_bound: bool
    cold_throughput: float
    deltas: dict = field(default_factory=dict)

    def as_rates(self, network_rate: float = math.inf) -> RateSpec:
        return RateSpec(self.G, self.P, self.C, self.S, network_rate)

    def to_dict(self) -> dict:
        return asdict(self)


def _phase(cfg, phase, n_iterations, cache_fraction, seeds=(0, 1)):
    vals = [measure_phase(cfg, phase, n_iterations, cache_fraction, seed=s) for s in seeds]
    mean = sum(vals) / len(vals)
    delta = (max(vals) - min(vals)) / mean if mean and math.isfinite(mean) else 0.0
    return mean, delta


def measure_rates(cfg: PipelineConfig, n_iterations: int = 100,
                  cache_fraction: float = 0.0) -> RateEstimate:
    """Estimate G, P, C and S from differential pipeline runs.

    G comes from synthetic data at the GPU; a fully cached run gives min(P, G)
    and so identifies P only when prep is visibly slower than compute. S and C
    come from device sweeps with prep and compute disabled. ``deltas`` holds
    the relative spread of each estimate across repeated runs.
    """
    G, dG = _phase(cfg, "synthetic_at_gpu", n_iterations, 0.0)
    cached, dP = _phase(cfg, "fully_cached", n_iterations, 0.0)
    cold, dcold = _phase(cfg, "cold_cache", n_iterations, cache_fraction)
    S, dS = _phase(cfg, "storage_only", n_iterations, 0.0)
    C, dC = _phase(cfg, "cache_only", n_iterations, 0.0)
    if cached > G * (1.0 + CONSISTENCY_TOLERANCE):
        raise MeasurementError(
            f"fully-cached throughput {cached:.4g} exceeds synthetic {G:.4g} by more than "
            f"{CONSISTENCY_TOLERANCE:.0%}")
    lower_bound = cached >= G * (1.0 - CONSISTENCY_TOLERANCE)
    return RateEstimate(G=G, P=cached, C=C, S=S, p_is_lower_bound=lower_bound,
                        cold_throughput=cold,
                        deltas={"G": dG, "P": dP, "C": dC, "S": dS, "cold": dcold})

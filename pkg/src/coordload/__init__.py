"""Input-pipeline stall analysis and coordinated data loading.

Library layout: ``core`` (datasets, epoch plans, rates), ``cache`` (MinIO and
LRU), ``storage`` (rate-limited devices), ``pipeline`` (fetch/prep/compute
with stall accounting), ``analyzer`` (what-if model and rate measurement),
``dist`` (partitioned caching over TCP), ``staging`` (coordinated prep for
HP search) and ``harness`` / ``cli`` (experiments and reports).
"""

from .analyzer import measure_rates, optimal_cache_fraction, predict_fetch_rate, predict_throughput
from .cache import LRUCache, MinIOCache, make_cache
from .core import Dataset, EpochPlan, RateSpec, SizeModel, make_dataset, plan_epoch
from .pipeline import PipelineConfig, StallReport, run_epoch, run_epochs

__version__ = "0.1.0"

"""Time-per-inference-step benchmarking of the architecture zoo."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DataInvariantError, NumericError
from .zoo import ArchitectureId, build

MIN_TIMER_TICKS = 10


@dataclass
class BenchReport:
    arch: str
    input_shape: tuple
    batch_size: int
    warmup_batches: int
    measured_batches: int
    times_ms: list = field(repr=False)
    threads: Optional[int] = 1

    @property
    def ms_per_step(self) -> float:
        return float(np.median(self.times_ms))

    @property
    def iqr_ms(self) -> float:
        q1, q3 = np.percentile(self.times_ms, [25, 75])
        return float(q3 - q1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["ms_per_step"] = self.ms_per_step
        d["iqr_ms"] = self.iqr_ms
        return d


def timer_resolution_ms() -> float:
    return time.get_clock_info("perf_counter").resolution * 1e3


def bench_inference(model, batch: np.ndarray, warmup: int = 5, reps: int = 30,
                    threads: Optional[int] = 1, arch: Optional[str] = None) -> BenchReport:
    """Median wall time of ``reps`` forward passes on one fixed batch.

    ``threads=1`` pins BLAS to a single thread; ``None`` leaves it alone.
    """
    if reps < 10:
        raise DataInvariantError("need at least 10 measured batches")
    if tuple(batch.shape[1:]) != tuple(model.input_shape):
        raise DataInvariantError(
            f"batch shape {batch.shape} does not fit model input {model.input_shape}")
    with _thread_limit(threads):
        times = _interleaved_times([model], batch, warmup, reps)[0]
    return _report(model, batch, warmup, reps, times, threads, arch)


def _thread_limit(threads):
    return threadpool_limits(threads) if threads else _NoLimit()


def _interleaved_times(models: list, batch: np.ndarray, warmup: int, reps: int) -> list:
    """Per-model forward times in ms, taking turns so load drift hits every model alike."""
    inputs = [batch.astype(m.dtype, copy=False) for m in models]
    for m, x in zip(models, inputs):
        for _ in range(warmup):
            m.forward(x)
    times = [[] for _ in models]
    for _ in range(reps):
        for m, x, out in zip(models, inputs, times):
            t0 = time.perf_counter()
            m.forward(x)
            out.append((time.perf_counter() - t0) * 1e3)
    return times


def _report(model, batch, warmup, reps, times, threads, arch=None) -> BenchReport:
    if float(np.median(times)) < MIN_TIMER_TICKS * timer_resolution_ms() or min(times) <= 0:
        raise NumericError("step time is below the timer resolution; use a larger batch")
    return BenchReport(arch or model.meta.get("arch", model.name), tuple(model.input_shape),
                       int(batch.shape[0]), warmup, reps, times, threads)


class _NoLimit:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def relative_reduction(fast_ms: float, slow_ms: float) -> float:
    """Percent by which ``fast_ms`` undercuts ``slow_ms``."""
    if slow_ms <= 0:
        raise DataInvariantError("reference time must be positive")
    return 100.0 * (slow_ms - fast_ms) / slow_ms


@dataclass
class ArchComparison:
    reports: list
    param_counts: dict

    def ranked(self) -> list:
        return sorted(self.reports, key=lambda r: r.ms_per_step)

    def reductions(self, reference: str = ArchitectureId.MOBILE.value) -> dict:
        ref = next(r for r in self.reports if r.arch == reference)
        return {r.arch: relative_reduction(ref.ms_per_step, r.ms_per_step)
                for r in self.reports if r.arch != reference}

    def to_dict(self) -> dict:
        return {"reports": [r.to_dict() for r in self.ranked()],
                "param_counts": self.param_counts,
                "reduction_pct_vs_mobile": self.reductions()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        reductions = self.reductions()
        rows = [("rank", "arch", "params", "ms/step", "IQR", "mobile saves")]
        for i, r in enumerate(self.ranked(), 1):
            saved = f"{reductions[r.arch]:.1f}%" if r.arch in reductions else "-"
            rows.append((str(i), ArchitectureId(r.arch).display_name,
                         str(self.param_counts[r.arch]), f"{r.ms_per_step:.2f}",
                         f"{r.iqr_ms:.2f}", saved))
        widths = [max(len(row[c]) for row in rows) for c in range(len(rows[0]))]
        lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
        first = self.reports[0]
        lines.append(f"batch {first.batch_size}, input {first.input_shape}, "
                     f"threads {first.threads}, median of {first.measured_batches}")
        return "\n".join(lines) + "\n"

    def plot(self, path) -> Path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        ranked = self.ranked()
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar([ArchitectureId(r.arch).display_name for r in ranked],
               [r.ms_per_step for r in ranked],
               yerr=[r.iqr_ms / 2 for r in ranked], color="#4477aa")
        ax.set_ylabel("ms per step")
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        return path


def compare_archs(input_size: int = 64, batch: int = 8, warmup: int = 5, reps: int = 30,
                  threads: Optional[int] = 1, seed: int = 0) -> ArchComparison:
    """Benchmark every architecture on one shared random input batch.

    Measured forwards alternate between the models, one rep at a time.
    """
    if reps < 10:
        raise DataInvariantError("need at least 10 measured batches")
    x = np.random.default_rng(seed).uniform(-1, 1, (batch, input_size, input_size, 3))
    x = x.astype(np.float32)
    archs = list(ArchitectureId)
    models = [build(a, input_size, seed=seed) for a in archs]
    with _thread_limit(threads):
        times = _interleaved_times(models, x, warmup, reps)
    reports = [_report(m, x, warmup, reps, t, threads, a.value)
               for a, m, t in zip(archs, models, times)]
    return ArchComparison(reports, {a.value: m.param_count() for a, m in zip(archs, models)})

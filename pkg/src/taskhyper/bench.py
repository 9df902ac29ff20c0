"""Wall-clock comparison of HINT against concatenated instructions as shots grow.

Inputs are synthetic letter strings padded to median lengths: instance 44,
instruction 69, and 64 more instruction tokens per shot (two shots take the
instruction to 197). Outputs are one token long.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import SEP_ID
from .hypernet import HintModel

TIMING_COLUMNS = ("shots", "mode", "median_ms", "p90_ms")
MODES = ("hint", "concat_baseline")


@dataclass(frozen=True)
class BenchShape:
    instance_len: int = 44
    instruction_len: int = 69
    tokens_per_shot: int = 64
    output_len: int = 1

    def hyper_len(self, shots: int) -> int:
        return self.instruction_len + self.tokens_per_shot * shots


def _letters(rng: np.random.Generator, n: int) -> list[int]:
    return [int(x) for x in rng.integers(97, 123, size=n)]


def run_once(model: HintModel, mode: str, shots: int, n_examples: int = 100, batch_size: int = 25,
             shape: BenchShape = BenchShape(), seed: int = 0) -> float:
    """Seconds to answer ``n_examples`` inputs of one task."""
    rng = np.random.default_rng(seed)
    instruction = _letters(rng, shape.hyper_len(shots))
    instances = [_letters(rng, shape.instance_len) for _ in range(n_examples)]
    start = time.perf_counter()
    if mode == "hint":
        ctx = model.context_from_ids(instruction)
        for lo in range(0, n_examples, batch_size):
            model.predict(ctx, instances[lo:lo + batch_size], max_len=shape.output_len)
    elif mode == "concat_baseline":
        inputs = [instruction + [SEP_ID] + x for x in instances]
        for lo in range(0, n_examples, batch_size):
            model.predict(None, inputs[lo:lo + batch_size], max_len=shape.output_len)
    else:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return time.perf_counter() - start


def latency_bench(model: HintModel, shots_list: Sequence[int] = (0, 1, 2, 3), n_examples: int = 100,
                  repetitions: int = 5, batch_size: int = 25, shape: BenchShape = BenchShape(),
                  seed: int = 0) -> list[dict]:
    """Median and 90th-percentile milliseconds per (shots, mode)."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rows = []
    for shots in shots_list:
        for mode in MODES:
            run_once(model, mode, shots, min(n_examples, batch_size), batch_size, shape, seed)  # warm-up
            times = np.array([run_once(model, mode, shots, n_examples, batch_size, shape, seed + r)
                              for r in range(repetitions)]) * 1e3
            rows.append({"shots": shots, "mode": mode, "median_ms": float(np.median(times)),
                         "p90_ms": float(np.percentile(times, 90))})
    return rows


def growth(rows: Sequence[dict], mode: str, lo: int, hi: int) -> float:
    """Median-latency increase for ``mode`` going from ``lo`` to ``hi`` shots."""
    by = {(r["shots"], r["mode"]): r["median_ms"] for r in rows}
    return by[(hi, mode)] - by[(lo, mode)]


def write_timing_csv(rows: Sequence[dict], path, manifest_hash: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if manifest_hash:
            fh.write(f"# manifest {manifest_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_COLUMNS)
        for r in rows:
            w.writerow([r["shots"], r["mode"], f"{r['median_ms']:.3f}", f"{r['p90_ms']:.3f}"])
    return path

"""
Latency as demonstrations are added
===================================

The concat baseline re-reads instruction + shots for every example; HINT
turns them into modules once. Untrained weights are fine for timing.
"""

# %%
from taskhyper import bench
from taskhyper.hypernet import HintModel
from taskhyper.transformer import ModelConfig

model = HintModel(ModelConfig())
rows = bench.latency_bench(model, shots_list=(0, 1, 2, 3), n_examples=100, repetitions=3)
for r in rows:
    print(f"{r['shots']}  {r['mode']:16s} {r['median_ms']:9.1f} ms")

# %%
for mode in bench.MODES:
    print(mode, "0->3 shots:", round(bench.growth(rows, mode, 0, 3), 1), "ms")

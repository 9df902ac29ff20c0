"""
How much does encoding the instruction once save?
=================================================

Walks through the analytic cost model: the preset tables, how cost moves
with instruction length, where HINT starts to win, and memory.
"""

# %%
import dataclasses

from taskhyper import costmodel as cm

sni = cm.load_preset("sni")
print(sni.description)
print(cm.reports_markdown(sni.table()))

# %% The concat baseline pays for the instruction on every example; HINT once.
base = sni.scenario("hint_def")
for row in cm.t_sweep(base, range(0, 513, 128)):
    print(row)

# %% Slope in t: N + N' for HINT no matter how many examples there are
a, b = cm.flops_hint(dataclasses.replace(base, t=100)), cm.flops_hint(base)
print("per instruction token:", (a - b) / (100 - base.t))

# %% Break-even number of examples. With N', A << N this is tiny.
for n_prime in (0, 10_000_000, 250_000_000):
    s = dataclasses.replace(base, N_prime=n_prime, A=1_000_000)
    print(f"N'={n_prime:>11,d}  n* = {cm.crossover_n(s)}")

# %% Memory: cached keys/values vs fused states plus generated modules
s = dataclasses.replace(base, s=base.t)
print("kv cache   ", cm.memory_kv_cache(s))
print("hint       ", cm.memory_hint(s))
print("hint (desk)", cm.memory_hint(s, prefix_len=8, bottleneck=32))

# %% P3-style numbers: short prompts, longer inputs
print(cm.reports_markdown(cm.load_preset("p3").table()))

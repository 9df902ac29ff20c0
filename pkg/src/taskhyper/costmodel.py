"""Analytic FLOPs and memory costs for concatenated instructions versus HINT.

FLOPs follow the params-times-tokens convention: a model with N parameters
spends N FLOPs per token. Multiply the results by 2 for the multiply-add
convention (see :func:`analytic_forward_flops` for the measured cross-check).
Decoder-side fusion attention is left out of the HINT count, as it is small.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PRESET_FORMAT = "cost-presets/1"
REPORT_COLUMNS = ("name", "method", "flops", "flops_concat", "flops_hint", "flops_hint_simplified",
                  "ratio_vs_reference", "memory_kv_cache", "memory_hint", "crossover_n")
SWEEP_COLUMNS = ("t", "flops_concat", "flops_hint", "flops_hint_simplified")
METHODS = ("concat", "hint")


class CostConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CostScenario:
    """Sizes for one cost estimate.

    ``joint`` is the measured instruction+instance length for concatenated
    inputs. When it is ``None`` the concat cost uses ``t + i``.
    """
    N: float
    t: int = 0
    i: int = 0
    o: int = 0
    n: int = 1
    N_prime: float = 0
    A: float = 0
    l: int = 0
    d: int = 0
    h: int = 0
    k: int = 0
    s: int | None = None
    joint: int | None = None
    method: str = "concat"
    name: str = ""

    def __post_init__(self):
        for key in ("N", "t", "i", "o", "n", "N_prime", "A", "l", "d", "h", "k"):
            if getattr(self, key) < 0:
                raise CostConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        if self.n < 1:
            raise CostConfigError(f"n must be >= 1, got {self.n}")
        if self.s is not None and self.s < 0:
            raise CostConfigError(f"s must be >= 0, got {self.s}")
        if self.joint is not None and self.joint < 0:
            raise CostConfigError(f"joint must be >= 0, got {self.joint}")
        if self.method not in METHODS:
            raise CostConfigError(f"method must be one of {METHODS}, got {self.method!r}")

    @property
    def cached_len(self) -> int:
        """Sequence length held in memory; defaults to the instruction length."""
        return self.t if self.s is None else self.s

    @property
    def concat_input_len(self) -> int:
        return self.t + self.i if self.joint is None else self.joint


def flops_concat(s: CostScenario) -> float:
    """Every example re-reads the instruction: ``N n (i + t + o)``."""
    return s.N * s.n * (s.concat_input_len + s.o)


def flops_hint(s: CostScenario) -> float:
    """Instruction encoded and turned into modules once, then n cheap passes."""
    return s.t * (s.N + s.N_prime) + s.n * (s.N + s.A) * (s.i + s.o)


def flops_hint_simplified(s: CostScenario) -> float:
    """``t N + n N (i + o)``, ignoring the generator and injected parameters."""
    return s.t * s.N + s.n * s.N * (s.i + s.o)


def memory_kv_cache(s: CostScenario) -> int:
    """Keys and values cached for the instruction: ``2 l h k s``."""
    return 2 * s.l * s.h * s.k * s.cached_len


def memory_kv_cache_simplified(s: CostScenario) -> int:
    """``2 l d s``; equal to :func:`memory_kv_cache` when ``h k == d``."""
    return 2 * s.l * s.d * s.cached_len


def memory_hint(s: CostScenario, prefix_len: int = 30, bottleneck: int = 512) -> int:
    """Fusion states plus generated adapters and prefixes.

    ``d s`` for the encoded instruction, ``2 bottleneck l d`` for the adapter
    pair per layer and ``2 prefix_len l h k`` for prefix keys and values.
    """
    if prefix_len < 0 or bottleneck < 0:
        raise CostConfigError("prefix_len and bottleneck must be >= 0")
    return s.d * s.cached_len + 2 * bottleneck * s.l * s.d + 2 * prefix_len * s.l * s.h * s.k


def crossover_n(s: CostScenario) -> int | None:
    """Smallest n with ``flops_hint < flops_concat``, or None if there is none.

    The gap ``concat - hint`` is ``n (N t' - A (i + o)) - t (N + N')`` where
    ``t'`` is the extra concat length, so it is linear in n.
    """
    extra = s.concat_input_len - s.i
    slope = s.N * extra - s.A * (s.i + s.o)
    if slope <= 0:
        return None
    n = math.floor(s.t * (s.N + s.N_prime) / slope) + 1
    return max(n, 1)


def method_flops(s: CostScenario) -> float:
    return flops_concat(s) if s.method == "concat" else flops_hint(s)


@dataclass(frozen=True)
class CostReport:
    name: str
    method: str
    flops: float
    flops_concat: float
    flops_hint: float
    flops_hint_simplified: float
    ratio_vs_reference: float
    memory_kv_cache: int
    memory_hint: int
    crossover_n: int | None

    def row(self) -> dict:
        return asdict(self)


def report(s: CostScenario, reference: CostScenario, prefix_len: int = 30, bottleneck: int = 512
           ) -> CostReport:
    ref = flops_concat(reference)
    if ref <= 0:
        raise CostConfigError(f"reference {reference.name!r} has zero cost")
    flops = method_flops(s)
    return CostReport(s.name, s.method, flops, flops_concat(s), flops_hint(s), flops_hint_simplified(s),
                      flops / ref, memory_kv_cache(s), memory_hint(s, prefix_len, bottleneck), crossover_n(s))


def relative_flops_table(scenarios: Sequence[CostScenario], reference: str, prefix_len: int = 30,
                         bottleneck: int = 512) -> list[CostReport]:
    """One report per scenario, costs relative to the reference's concat FLOPs."""
    by_name = {s.name: s for s in scenarios}
    if reference not in by_name:
        raise CostConfigError(f"reference scenario {reference!r} not among {sorted(by_name)}")
    ref = by_name[reference]
    return [report(s, ref, prefix_len, bottleneck) for s in scenarios]


def t_sweep(s: CostScenario, ts: Iterable[int]) -> list[dict]:
    """FLOPs as the instruction length varies, everything else fixed."""
    rows = []
    for t in ts:
        cur = replace(s, t=int(t), joint=None)
        rows.append({"t": int(t), "flops_concat": flops_concat(cur), "flops_hint": flops_hint(cur),
                     "flops_hint_simplified": flops_hint_simplified(cur)})
    return rows


# -- rendering -----------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if not v.is_integer() else str(int(v))
    return str(v)


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def reports_csv(reports: Sequence[CostReport]) -> str:
    return to_csv([r.row() for r in reports], REPORT_COLUMNS)


def reports_markdown(reports: Sequence[CostReport]) -> str:
    lines = ["| Scenario | Method | FLOPs | Rel. FLOPs | n* |", "|---|---|---:|---:|---:|"]
    for r in reports:
        cross = "" if r.crossover_n is None else str(r.crossover_n)
        lines.append(f"| {r.name} | {r.method} | {r.flops:.4g} | x{r.ratio_vs_reference:.2f} | {cross} |")
    return "\n".join(lines) + "\n"


# -- presets -------------------------------------------------------------------

@dataclass
class Preset:
    name: str
    description: str
    reference: str
    scenarios: list[CostScenario] = field(default_factory=list)

    def table(self, prefix_len: int = 30, bottleneck: int = 512) -> list[CostReport]:
        return relative_flops_table(self.scenarios, self.reference, prefix_len, bottleneck)

    def scenario(self, name: str) -> CostScenario:
        for s in self.scenarios:
            if s.name == name:
                return s
        raise KeyError(name)


_SHARED = {"N": float, "N_prime": float, "A": float, "n": int, "o": int,
           "layers": int, "model_dim": int, "heads": int, "head_dim": int}
_ROW = {"t": int, "i": int, "o": int, "joint": int, "n": int, "s": int}
_RENAME = {"layers": "l", "model_dim": "d", "heads": "h", "head_dim": "k"}


def _read_parser(text: str | None = None, path: str | Path | None = None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if text is None:
        if path is None:
            text = resources.files("taskhyper").joinpath("data/presets.ini").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise CostConfigError(f"could not parse presets: {e}") from e
    version = cp.get("format", "version", fallback=PRESET_FORMAT)
    if version != PRESET_FORMAT:
        raise CostConfigError(f"unsupported preset format {version!r}")
    return cp


def _convert(section, key, kind):
    try:
        return kind(float(section[key])) if kind is int else kind(section[key])
    except ValueError as e:
        raise CostConfigError(f"[{section.name}] {key} = {section[key]!r} is not a number") from e


def load_presets(path: str | Path | None = None, text: str | None = None) -> dict[str, Preset]:
    cp = _read_parser(text, path)
    presets: dict[str, Preset] = {}
    for sec in cp.sections():
        if sec == "format" or "." in sec:
            continue
        base = cp[sec]
        shared = {}
        for key, value in base.items():
            if key in ("description", "reference"):
                continue
            if key not in _SHARED:
                raise CostConfigError(f"[{sec}] unknown key {key!r}")
            shared[_RENAME.get(key, key)] = _convert(base, key, _SHARED[key])
        if "N" not in shared:
            raise CostConfigError(f"[{sec}] missing N")
        preset = Preset(sec, base.get("description", ""), base.get("reference", ""))
        for row_sec in cp.sections():
            if not row_sec.startswith(sec + "."):
                continue
            row = cp[row_sec]
            fields = dict(shared)
            for key in row:
                if key == "method":
                    continue
                if key not in _ROW:
                    raise CostConfigError(f"[{row_sec}] unknown key {key!r}")
                fields[key] = _convert(row, key, _ROW[key])
            fields["method"] = row.get("method", "concat")
            fields["name"] = row_sec[len(sec) + 1:]
            preset.scenarios.append(CostScenario(**fields))
        if not preset.scenarios:
            raise CostConfigError(f"preset {sec!r} has no rows")
        if preset.reference not in {s.name for s in preset.scenarios}:
            raise CostConfigError(f"preset {sec!r}: reference {preset.reference!r} is not a row")
        presets[sec] = preset
    return presets


def load_preset(name: str, path: str | Path | None = None) -> Preset:
    presets = load_presets(path)
    if name not in presets:
        raise CostConfigError(f"unknown preset {name!r}; available: {sorted(presets)}")
    return presets[name]


# -- measured cross-check --------------------------------------------------------

def _side_params(model, side: str) -> int:
    total = 0
    for name, t in model.params.items():
        if name.endswith("_pos") or name.endswith("_norm"):
            continue
        if name.startswith(f"model.{side}") or (side == "dec" and name == "model.lm_head"):
            total += t.size
    return total


def analytic_forward_flops(model, src_len: int, tgt_len: int, attention: bool = False) -> int:
    """``2 * params * tokens`` split by side.

    Encoder tokens pass through encoder weights. Decoder tokens pass through
    decoder weights and the output head. Embedding lookups are free. With
    ``attention=True`` the score and mixing products are added and the
    decoder's cross-attention key/value projections are charged per source
    token, which makes the count exact for the plain model.
    """
    flops = 2 * (_side_params(model, "enc") * src_len + _side_params(model, "dec") * tgt_len)
    if attention:
        c = model.config
        d, S, T = c.model_dim, src_len, tgt_len
        flops += 4 * c.layers * d * (S * S + T * T + T * S)
        flops += 2 * c.layers * 2 * d * d * (S - T)
    return flops


def measured_forward_flops(model, src_len: int, tgt_len: int, seed: int = 0) -> int:
    """Multiply-add count of one teacher-forced pass through ``model`` (a Transformer)."""
    from .numerics import FlopCounter, no_grad

    rng = np.random.default_rng(seed)
    src = rng.integers(0, 256, size=(1, src_len))
    tgt = rng.integers(0, 256, size=(1, tgt_len))
    with no_grad(), FlopCounter() as fc:
        model.decode_batch(model.encode_batch(src), tgt)
    return fc.flops

"""Parameter-efficient modules: parallel adapters, attention prefixes, LoRA.

A :class:`PeftSet` holds one :class:`LayerAdaptation` per layer (encoder
layers first, then decoder layers). Encoder layers carry a self-attention
prefix; decoder layers carry both self- and cross-attention prefixes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import arrayio
from .numerics import ShapeError, Tensor
from .transformer import LayerAdaptation, ModelConfig, adapter_branch, lora_projection

KINDS = ("adapters", "prefixes", "lora")
PEFT_FORMAT = "peftset/1"


def adapter_forward(x: Tensor, ffn_out: Tensor, down: Tensor, up: Tensor) -> Tensor:
    """``ffn_out + up(GELU(down(x)))`` where ``x`` is the FFN input."""
    if x.shape != ffn_out.shape:
        raise ShapeError(f"adapter input {x.shape} and FFN output {ffn_out.shape} differ")
    if down.shape[-2] != x.shape[-1] or up.shape[-1] != x.shape[-1] or down.shape[-1] != up.shape[-2]:
        raise ShapeError(f"adapter weights {down.shape}/{up.shape} do not fit input {x.shape}")
    return ffn_out + adapter_branch(x, down, up)


def lora_forward(x: Tensor, base_weight: Tensor, a: Tensor, b: Tensor, scaling: float | None = None
                 ) -> Tensor:
    """``x W + scaling * x A B``; scaling defaults to ``1/r``."""
    r = a.shape[-1]
    if r < 1:
        raise ShapeError("LoRA rank must be >= 1")
    if a.shape[-2] != base_weight.shape[-2] or b.shape[-2] != r or b.shape[-1] != base_weight.shape[-1]:
        raise ShapeError(f"LoRA factors {a.shape}/{b.shape} do not fit weight {base_weight.shape}")
    return lora_projection(x, base_weight, a, b, 1.0 / r if scaling is None else scaling)


@dataclass
class PeftSet:
    per_layer: list[LayerAdaptation]
    kinds: frozenset[str]
    config: ModelConfig

    def __post_init__(self):
        self.kinds = frozenset(self.kinds)
        unknown = self.kinds - set(KINDS)
        if unknown:
            raise ValueError(f"unknown module kinds {sorted(unknown)}")
        self.validate()

    @property
    def batched(self) -> bool:
        """True when tensors carry a leading batch axis."""
        for ad in self.per_layer:
            for name, t in _named(ad):
                return t.ndim > (3 if "prefix" in name else 2)
        return False

    def validate(self):
        c = self.config
        if len(self.per_layer) != c.total_layers:
            raise ShapeError(f"PeftSet has {len(self.per_layer)} layers, model has {c.total_layers}")
        for idx, ad in enumerate(self.per_layer):
            is_dec = idx >= c.layers
            if ("adapters" in self.kinds) != (ad.adapter is not None):
                raise ShapeError(f"layer {idx}: adapter presence disagrees with kinds")
            if ("lora" in self.kinds) != (ad.lora is not None):
                raise ShapeError(f"layer {idx}: LoRA presence disagrees with kinds")
            has_pref = "prefixes" in self.kinds
            if has_pref != (ad.self_prefix is not None) or (has_pref and is_dec) != (ad.cross_prefix is not None):
                raise ShapeError(f"layer {idx}: prefix presence disagrees with kinds")
            if ad.adapter is not None:
                down, up = ad.adapter
                if down.shape[-2:] != (c.model_dim, down.shape[-1]) or up.shape[-1] != c.model_dim \
                        or down.shape[-1] != up.shape[-2]:
                    raise ShapeError(f"layer {idx}: adapter {down.shape}/{up.shape}")
                if down.shape[-1] not in (c.adapter_bottleneck,):
                    raise ShapeError(f"layer {idx}: bottleneck {down.shape[-1]} != {c.adapter_bottleneck}")
            for pref in (ad.self_prefix, ad.cross_prefix):
                if pref is None:
                    continue
                k, v = pref
                if k.shape != v.shape or k.shape[-2:] != (c.heads, c.head_dim):
                    raise ShapeError(f"layer {idx}: prefix {k.shape}/{v.shape}")
                if k.shape[-3] not in (0, c.prefix_length):
                    raise ShapeError(f"layer {idx}: prefix length {k.shape[-3]} != {c.prefix_length}")
            if ad.lora is not None:
                for key in ("q", "v"):
                    a, b = ad.lora[key]
                    if a.shape[-2] != c.model_dim or b.shape[-1] != c.model_dim or a.shape[-1] != b.shape[-2]:
                        raise ShapeError(f"layer {idx}: LoRA {key} {a.shape}/{b.shape}")

    # -- access -----------------------------------------------------------
    def encoder_layers(self) -> list[LayerAdaptation]:
        return self.per_layer[: self.config.layers]

    def decoder_layers(self) -> list[LayerAdaptation]:
        return self.per_layer[self.config.layers:]

    def item(self, i: int) -> "PeftSet":
        """Unbatched module set for batch item ``i`` (detached copies)."""
        return PeftSet([_map(ad, lambda t: Tensor(t.data[i])) for ad in self.per_layer],
                       self.kinds, self.config)

    def detached(self) -> "PeftSet":
        return PeftSet([_map(ad, lambda t: Tensor(t.data)) for ad in self.per_layer], self.kinds, self.config)

    def num_values(self) -> int:
        return sum(t.size for ad in self.per_layer for t in _tensors(ad))

    # -- serialization ----------------------------------------------------
    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for idx, ad in enumerate(self.per_layer):
            for name, t in _named(ad):
                out[f"layer{idx}.{name}"] = t.data
        return out

    def meta(self) -> dict:
        return {"format": PEFT_FORMAT, "kinds": sorted(self.kinds), "config": self.config.to_dict()}

    def to_bytes(self) -> bytes:
        return arrayio.dumps(self.meta(), self.to_arrays())

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "PeftSet":
        if meta.get("format") != PEFT_FORMAT:
            raise ValueError(f"unsupported PeftSet format {meta.get('format')!r}")
        config = ModelConfig.from_dict(meta["config"])
        per_layer = []
        for idx in range(config.total_layers):
            def get(name):
                key = f"layer{idx}.{name}"
                return Tensor(arrays[key]) if key in arrays else None
            ad = LayerAdaptation()
            if get("adapter.down") is not None:
                ad.adapter = (get("adapter.down"), get("adapter.up"))
            if get("self_prefix.keys") is not None:
                ad.self_prefix = (get("self_prefix.keys"), get("self_prefix.values"))
            if get("cross_prefix.keys") is not None:
                ad.cross_prefix = (get("cross_prefix.keys"), get("cross_prefix.values"))
            if get("lora.q.a") is not None:
                ad.lora = {k: (get(f"lora.{k}.a"), get(f"lora.{k}.b")) for k in ("q", "v")}
            per_layer.append(ad)
        return cls(per_layer, frozenset(meta["kinds"]), config)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PeftSet":
        return cls.from_arrays(*arrayio.loads(blob))


def _named(ad: LayerAdaptation):
    if ad.adapter is not None:
        yield "adapter.down", ad.adapter[0]
        yield "adapter.up", ad.adapter[1]
    for site in ("self_prefix", "cross_prefix"):
        pref = getattr(ad, site)
        if pref is not None:
            yield f"{site}.keys", pref[0]
            yield f"{site}.values", pref[1]
    if ad.lora is not None:
        for key in ("q", "v"):
            yield f"lora.{key}.a", ad.lora[key][0]
            yield f"lora.{key}.b", ad.lora[key][1]


def _tensors(ad: LayerAdaptation):
    return (t for _, t in _named(ad))


def _map(ad: LayerAdaptation, fn) -> LayerAdaptation:
    pair = lambda p: None if p is None else (fn(p[0]), fn(p[1]))
    return LayerAdaptation(
        adapter=pair(ad.adapter),
        self_prefix=pair(ad.self_prefix),
        cross_prefix=pair(ad.cross_prefix),
        lora=None if ad.lora is None else {k: pair(v) for k, v in ad.lora.items()},
    )


def make_identity_peft(config: ModelConfig, seed: int = 0) -> PeftSet:
    """A module set whose injection is exactly a no-op.

    Adapter down-projections and LoRA ``a`` factors are random; the
    up-projections and ``b`` factors are zero, and prefixes have length 0.
    """
    rng = np.random.default_rng(seed)
    d, h, k = config.model_dim, config.heads, config.head_dim
    per_layer = []
    for idx in range(config.total_layers):
        empty = lambda: (Tensor(np.zeros((0, h, k))), Tensor(np.zeros((0, h, k))))
        per_layer.append(LayerAdaptation(
            adapter=(Tensor(rng.normal(size=(d, config.adapter_bottleneck))),
                     Tensor(np.zeros((config.adapter_bottleneck, d)))),
            self_prefix=empty(),
            cross_prefix=empty() if idx >= config.layers else None,
            lora={key: (Tensor(rng.normal(size=(d, config.lora_rank))),
                        Tensor(np.zeros((config.lora_rank, d)))) for key in ("q", "v")},
        ))
    return PeftSet(per_layer, frozenset(KINDS), config)

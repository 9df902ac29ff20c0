"""Pre-norm encoder-decoder transformer with adapter, prefix and LoRA hooks.

All forward passes are batched: token arrays are ``(B, S)`` int arrays with a
boolean mask marking real (non-pad) positions. Per-layer adaptations may carry
a leading batch axis (one generated module set per item, as in mixed-task
training) or none (one module set shared by the whole batch).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

NEG_INF = -1e9

# Special token ids follow the 256 byte values.
PAD_ID = 256
EOS_ID = 257
BOS_ID = 258
SEP_ID = 259


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 128
    vocab_size: int = 260
    adapter_bottleneck: int = 32
    prefix_length: int = 8
    embed_dim: int = 64
    max_seq_len: int = 512
    lora_rank: int = 8

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.heads * self.head_dim != self.model_dim:
            raise ValueError("heads * head_dim must equal model_dim")
        if self.embed_dim != self.model_dim:
            raise ValueError("embed_dim must equal model_dim")

    @property
    def total_layers(self) -> int:
        return 2 * self.layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerAdaptation:
    """Modules injected into one layer. Any field may be None.

    adapter: (down (..., d, n_a), up (..., n_a, d))
    self_prefix / cross_prefix: (keys, values), each (..., p, h, k)
    lora: {"q": (a, b), "v": (a, b)} with a (..., d, r) and b (..., r, d)
    """

    adapter: tuple[Tensor, Tensor] | None = None
    self_prefix: tuple[Tensor, Tensor] | None = None
    cross_prefix: tuple[Tensor, Tensor] | None = None
    lora: dict[str, tuple[Tensor, Tensor]] | None = None


@dataclass
class EncoderOutput:
    """Encoded states ``(B, S, d)`` and a ``(B, S)`` boolean mask of real rows."""

    states: Tensor
    mask: np.ndarray

    def __post_init__(self):
        if self.states.shape[:2] != self.mask.shape:
            raise ShapeError(f"states {self.states.shape} vs mask {self.mask.shape}")

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


@dataclass
class Parameters:
    """Named parameter store shared by the model and hypernetwork."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(array, requires_grad=True)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self.tensors.items() if n.startswith(prefix))

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays in; returns names left at their current values."""
        missing = [n for n in self.tensors if n not in state]
        if strict:
            extra = [n for n in state if n not in self.tensors]
            if missing or extra:
                raise KeyError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for n, t in self.tensors.items():
            if n in state:
                if state[n].shape != t.shape:
                    raise ShapeError(f"{n}: checkpoint shape {state[n].shape} != {t.shape}")
                t.data = np.array(state[n], dtype=nx.DTYPE, copy=True)
        return missing


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def _as_batched(t: Tensor, ndim: int, batch: int) -> Tensor:
    """Broadcast an unbatched module tensor to a leading batch axis."""
    if t.ndim == ndim:
        return t
    return nx.broadcast_to(t, (batch,) + t.shape)


def attention(q: Tensor, k_states: Tensor, v_states: Tensor, prefix=None, mask=None,
              causal: bool = False, return_weights: bool = False):
    """Scaled dot-product attention over ``(B, h, S, k)`` tensors.

    ``prefix`` is an optional (keys, values) pair shaped ``(B, p, h, k)`` or
    ``(p, h, k)``; prefix slots are prepended to the keys and are never
    masked. ``mask`` is a ``(B, S_k)`` boolean key mask; ``causal`` applies a
    lower-triangular mask over the non-prefix keys.
    """
    if q.ndim != 4 or k_states.ndim != 4 or v_states.ndim != 4:
        raise ShapeError("attention expects (B, h, S, k) tensors")
    B, h, Sq, k = q.shape
    if k_states.shape[-1] != k or k_states.shape[1] != h or k_states.shape != v_states.shape:
        raise ShapeError(f"query {q.shape} vs keys {k_states.shape} / values {v_states.shape}")
    p = 0
    if prefix is not None:
        pk, pv = prefix
        if pk.shape[-2:] != (h, k) or pv.shape != pk.shape:
            raise ShapeError(f"prefix {pk.shape} does not match heads={h}, head_dim={k}")
        p = pk.shape[-3]
        if p > 0:
            pk = _as_batched(pk, 4, B).transpose(0, 2, 1, 3)
            pv = _as_batched(pv, 4, B).transpose(0, 2, 1, 3)
            k_states = nx.concat([pk, k_states], axis=2)
            v_states = nx.concat([pv, v_states], axis=2)
    Sk = k_states.shape[2]
    scores = nx.matmul(q, k_states.T) * (1.0 / math.sqrt(k))
    bias = np.zeros((B, 1, Sq, Sk))
    if mask is not None:
        bias[:, :, :, p:] += np.where(mask, 0.0, NEG_INF)[:, None, None, :]
    if causal:
        tri = np.triu(np.ones((Sq, Sk - p), dtype=bool), k=1)
        bias[:, :, :, p:] += np.where(tri, NEG_INF, 0.0)
    if mask is not None or causal:
        scores = scores + bias
    weights = nx.softmax(scores, axis=-1)
    out = nx.matmul(weights, v_states)
    if return_weights:
        return out, weights
    return out


def adapter_branch(x: Tensor, down: Tensor, up: Tensor) -> Tensor:
    return nx.matmul(nx.gelu(nx.matmul(x, down)), up)


def lora_projection(x: Tensor, base_weight: Tensor, a: Tensor, b: Tensor, scaling: float) -> Tensor:
    return nx.matmul(x, base_weight) + nx.matmul(nx.matmul(x, a), b) * scaling


class Transformer:
    """The underlying encoder-decoder model.

    Parameters live in a shared :class:`Parameters` store under ``model.``.
    """

    def __init__(self, config: ModelConfig, params: Parameters | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else Parameters()
        self.trace: list[tuple[str, tuple[int, ...]]] | None = None
        self._init(np.random.default_rng(seed))

    # -- construction -----------------------------------------------------
    def _init(self, rng):
        c = self.config
        d = c.model_dim
        P = self.params
        P.add("model.embed", _normal(rng, (c.vocab_size, d), 1.0))
        P.add("model.enc_pos", _normal(rng, (c.max_seq_len, d), 0.1))
        P.add("model.dec_pos", _normal(rng, (c.max_seq_len, d), 0.1))
        for stack in ("enc", "dec"):
            for i in range(c.layers):
                pre = f"model.{stack}{i}."
                sites = ["self"] + (["cross"] if stack == "dec" else [])
                for site in sites:
                    P.add(pre + f"{site}_norm", np.ones(d))
                    for w in ("q", "k", "v", "o"):
                        P.add(pre + f"{site}_{w}", _normal(rng, (d, d), d ** -0.5))
                P.add(pre + "ffn_norm", np.ones(d))
                P.add(pre + "ffn_in", _normal(rng, (d, c.ffn_dim), d ** -0.5))
                P.add(pre + "ffn_out", _normal(rng, (c.ffn_dim, d), c.ffn_dim ** -0.5))
            P.add(f"model.{stack}_final_norm", np.ones(d))
        P.add("model.lm_head", _normal(rng, (d, c.vocab_size), d ** -0.5))

    def p(self, name: str) -> Tensor:
        return self.params["model." + name]

    def parameter_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith("model.")]

    # -- blocks -----------------------------------------------------------
    def _split_heads(self, x: Tensor) -> Tensor:
        B, S, _ = x.shape
        c = self.config
        return x.reshape(B, S, c.heads, c.head_dim).transpose(0, 2, 1, 3)

    def _merge_heads(self, x: Tensor) -> Tensor:
        B, h, S, k = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, S, h * k)

    def _project(self, x: Tensor, weight: Tensor, lora, key: str) -> Tensor:
        if lora is not None and key in lora:
            a, b = lora[key]
            B = x.shape[0]
            return lora_projection(x, weight, _as_batched(a, 3, B), _as_batched(b, 3, B),
                                   1.0 / a.shape[-1])
        return nx.matmul(x, weight)

    def _attn_block(self, pre: str, site: str, x: Tensor, source: Tensor | None, key_mask,
                    prefix, lora, causal: bool) -> Tensor:
        h = nx.rms_norm(x, self.p(pre + f"{site}_norm"))
        kv_in = h if source is None else source
        q = self._split_heads(self._project(h, self.p(pre + f"{site}_q"), lora, "q"))
        k = self._split_heads(nx.matmul(kv_in, self.p(pre + f"{site}_k")))
        v = self._split_heads(self._project(kv_in, self.p(pre + f"{site}_v"), lora, "v"))
        if self.trace is not None:
            plen = 0 if prefix is None else prefix[0].shape[-3]
            self.trace.append((pre + site, (q.shape[2], plen + k.shape[2])))
        out = attention(q, k, v, prefix=prefix, mask=key_mask, causal=causal)
        return x + nx.matmul(self._merge_heads(out), self.p(pre + f"{site}_o"))

    def _ffn_block(self, pre: str, x: Tensor, adapter) -> Tensor:
        h = nx.rms_norm(x, self.p(pre + "ffn_norm"))
        y = nx.matmul(nx.gelu(nx.matmul(h, self.p(pre + "ffn_in"))), self.p(pre + "ffn_out"))
        if adapter is not None:
            down, up = adapter
            B = x.shape[0]
            y = y + adapter_branch(h, _as_batched(down, 3, B), _as_batched(up, 3, B))
        return x + y

    def _check_adaptations(self, adaptations, count: int):
        if adaptations and len(adaptations) != count:
            raise ShapeError(f"expected {count} layer adaptations, got {len(adaptations)}")
        c = self.config
        for ad in adaptations or ():
            if ad.adapter is not None:
                down, up = ad.adapter
                if down.shape[-2] != c.model_dim or up.shape[-1] != c.model_dim \
                        or down.shape[-1] != up.shape[-2]:
                    raise ShapeError(f"adapter shapes {down.shape}/{up.shape} do not fit d={c.model_dim}")
            for pref in (ad.self_prefix, ad.cross_prefix):
                if pref is not None and pref[0].shape[-2:] != (c.heads, c.head_dim):
                    raise ShapeError(f"prefix shape {pref[0].shape} does not fit h={c.heads}, k={c.head_dim}")

    # -- public forward ---------------------------------------------------
    def encode_batch(self, ids: np.ndarray, mask: np.ndarray | None = None,
                     adaptations: Sequence[LayerAdaptation] | None = None) -> EncoderOutput:
        """Encode a ``(B, S)`` id array. ``adaptations`` covers encoder layers only."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"expected (B, S) ids, got {ids.shape}")
        B, S = ids.shape
        if S > self.config.max_seq_len:
            raise SequenceLengthError(f"sequence length {S} exceeds max_seq_len {self.config.max_seq_len}")
        mask = np.ones((B, S), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        self._check_adaptations(adaptations, self.config.layers)
        x = nx.embedding(self.p("embed"), ids) + self.p("enc_pos")[:S]
        for i in range(self.config.layers):
            ad = adaptations[i] if adaptations else LayerAdaptation()
            pre = f"enc{i}."
            x = self._attn_block(pre, "self", x, None, mask, ad.self_prefix, ad.lora, causal=False)
            x = self._ffn_block(pre, x, ad.adapter)
        x = nx.rms_norm(x, self.p("enc_final_norm"))
        return EncoderOutput(x, mask)

    def decode_batch(self, source: EncoderOutput, dec_ids: np.ndarray,
                     adaptations: Sequence[LayerAdaptation] | None = None) -> Tensor:
        """Teacher-forced decoder pass; returns logits ``(B, T, V)``."""
        dec_ids = np.asarray(dec_ids, dtype=np.int64)
        B, T = dec_ids.shape
        if source.states.shape[1] == 0:
            raise ShapeError("decoder needs a nonempty source")
        if T > self.config.max_seq_len:
            raise SequenceLengthError(f"decoder length {T} exceeds max_seq_len {self.config.max_seq_len}")
        self._check_adaptations(adaptations, self.config.layers)
        y = nx.embedding(self.p("embed"), dec_ids) + self.p("dec_pos")[:T]
        for i in range(self.config.layers):
            ad = adaptations[i] if adaptations else LayerAdaptation()
            pre = f"dec{i}."
            y = self._attn_block(pre, "self", y, None, None, ad.self_prefix, ad.lora, causal=True)
            y = self._attn_block(pre, "cross", y, source.states, source.mask, ad.cross_prefix, None,
                                 causal=False)
            y = self._ffn_block(pre, y, ad.adapter)
        y = nx.rms_norm(y, self.p("dec_final_norm"))
        return nx.matmul(y, self.p("lm_head"))

    # -- single-sequence conveniences ------------------------------------
    def encode(self, tokens: Sequence[int], adaptations: Sequence[LayerAdaptation] | None = None
               ) -> EncoderOutput:
        """Encode one sequence; ``adaptations`` lists all layers (encoder first) or is empty."""
        enc_ad, _ = split_adaptations(adaptations, self.config.layers)
        return self.encode_batch(np.asarray([list(tokens)], dtype=np.int64), None, enc_ad)

    def decode_step(self, encoder_states: EncoderOutput, prev_tokens: Sequence[int],
                    adaptations: Sequence[LayerAdaptation] | None = None) -> Tensor:
        """Logits ``(V,)`` for the token following ``prev_tokens`` (BOS implied)."""
        _, dec_ad = split_adaptations(adaptations, self.config.layers)
        ids = np.asarray([[BOS_ID] + list(prev_tokens)], dtype=np.int64)
        logits = self.decode_batch(encoder_states, ids, dec_ad)
        return logits[0, -1]

    def greedy_decode_batch(self, source: EncoderOutput, adaptations=None, max_len: int = 32,
                            eos_id: int | None = None) -> list[list[int]]:
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        eos = EOS_ID if eos_id is None else eos_id
        B = source.states.shape[0]
        ids = np.full((B, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        outputs: list[list[int]] = [[] for _ in range(B)]
        with nx.no_grad():
            for _ in range(max_len):
                logits = self.decode_batch(source, ids, adaptations).data[:, -1]
                nxt = logits.argmax(axis=-1)
                for b in range(B):
                    if not done[b]:
                        if nxt[b] == eos:
                            done[b] = True
                        else:
                            outputs[b].append(int(nxt[b]))
                if done.all():
                    break
                ids = np.concatenate([ids, nxt[:, None]], axis=1)
        return outputs

    def greedy_decode(self, encoder_states: EncoderOutput, adaptations=None, max_len: int = 32) -> list[int]:
        _, dec_ad = split_adaptations(adaptations, self.config.layers)
        return self.greedy_decode_batch(encoder_states, dec_ad, max_len)[0]


def split_adaptations(adaptations, layers: int):
    """Split an all-layer list (encoder layers first) into encoder/decoder halves."""
    if not adaptations:
        return None, None
    if len(adaptations) != 2 * layers:
        raise ShapeError(f"expected {2 * layers} layer adaptations, got {len(adaptations)}")
    return list(adaptations[:layers]), list(adaptations[layers:])

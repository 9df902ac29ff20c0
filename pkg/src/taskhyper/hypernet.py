"""Instruction-conditioned parameter generation and instruction fusion.

The hyperencoder is the underlying model's own encoder (same parameter
objects, no modules injected). A bank of learned row embeddings, one per
generated column or prefix slot, attends over the encoded instruction; each
row is then mapped to a ``d``-vector by a two-layer MLP shared across all
layers for its module kind. Rows are assembled into per-layer modules.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import arrayio
from . import numerics as nx
from .corpus import hyper_input_ids, pad_batch
from .numerics import ShapeError, Tensor
from .peft import KINDS, PeftSet
from .transformer import (
    EncoderOutput,
    LayerAdaptation,
    ModelConfig,
    Parameters,
    SequenceLengthError,
    Transformer,
    attention,
)


@dataclass(frozen=True)
class HyperConfig:
    """Which modules are generated and whether the decoder sees the instruction."""

    kinds: tuple[str, ...] = ("adapters", "prefixes")
    fusion: bool = True
    embed_init_std: float = 0.02
    out_init_std: float = 0.01

    def __post_init__(self):
        bad = set(self.kinds) - set(KINDS)
        if bad:
            raise ValueError(f"unknown module kinds {sorted(bad)}")
        object.__setattr__(self, "kinds", tuple(k for k in KINDS if k in self.kinds))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kinds"] = list(self.kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperConfig":
        d = dict(d)
        d["kinds"] = tuple(d["kinds"])
        return cls(**d)


@dataclass(frozen=True)
class RowSlot:
    kind: str
    target: str   # e.g. "adapter.down", "prefix.keys", "lora.q.a"
    site: int     # layer index (adapters/LoRA) or prefix-site index
    slot: int     # column / token index


def prefix_sites(config: ModelConfig) -> list[tuple[int, str]]:
    """(layer index, attention site) for every prefix location."""
    sites = [(i, "self") for i in range(config.layers)]
    for i in range(config.layers):
        sites += [(config.layers + i, "self"), (config.layers + i, "cross")]
    return sites


def build_index_map(config: ModelConfig, kinds: Sequence[str]) -> dict[str, list[RowSlot]]:
    """Row layout of each kind's embedding table."""
    out: dict[str, list[RowSlot]] = {}
    if "adapters" in kinds:
        out["adapters"] = [RowSlot("adapters", f"adapter.{part}", layer, j)
                           for layer in range(config.total_layers)
                           for part in ("down", "up")
                           for j in range(config.adapter_bottleneck)]
    if "prefixes" in kinds:
        out["prefixes"] = [RowSlot("prefixes", f"prefix.{part}", s, j)
                           for s in range(len(prefix_sites(config)))
                           for part in ("keys", "values")
                           for j in range(config.prefix_length)]
    if "lora" in kinds:
        out["lora"] = [RowSlot("lora", f"lora.{proj}.{fac}", layer, j)
                       for layer in range(config.total_layers)
                       for proj in ("q", "v")
                       for fac in ("a", "b")
                       for j in range(config.lora_rank)]
    return out


class HyperNetwork:
    """Generator bank: row embeddings, one cross-attention block, per-kind MLPs."""

    def __init__(self, config: ModelConfig, hconfig: HyperConfig, params: Parameters, seed: int = 1):
        self.config = config
        self.hconfig = hconfig
        self.params = params
        self.index_map = build_index_map(config, hconfig.kinds)
        self._init(np.random.default_rng(seed))

    def _init(self, rng):
        d = self.config.model_dim
        P = self.params
        for kind, rows in self.index_map.items():
            P.add(f"hyper.embed.{kind}", rng.normal(0.0, self.hconfig.embed_init_std, (len(rows), d)))
        if not self.index_map:
            return
        P.add("hyper.ca_norm", np.ones(d))
        for w in ("q", "k", "v", "o"):
            P.add(f"hyper.ca_{w}", rng.normal(0.0, d ** -0.5, (d, d)))
        for kind in self.index_map:
            P.add(f"hyper.mlp.{kind}.w1", rng.normal(0.0, d ** -0.5, (d, d)))
            P.add(f"hyper.mlp.{kind}.b1", np.zeros(d))
            P.add(f"hyper.mlp.{kind}.w2", rng.normal(0.0, self.hconfig.out_init_std, (d, d)))
            P.add(f"hyper.mlp.{kind}.b2", np.zeros(d))

    # -- audits -----------------------------------------------------------
    def parameter_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith("hyper.")]

    def parameter_count(self) -> int:
        return self.params.count("hyper.")

    def mlp_parameter_count(self, kind: str) -> int:
        return self.params.count(f"hyper.mlp.{kind}.")

    def embed_rows(self) -> int:
        return sum(len(r) for r in self.index_map.values())

    @property
    def embed_table(self) -> Tensor:
        return nx.concat([self.params[f"hyper.embed.{k}"] for k in self.index_map], axis=0)

    # -- generation -------------------------------------------------------
    def attend(self, instr: EncoderOutput) -> Tensor:
        """Cross-attend all rows over the instruction; returns ``(B, M, d)``."""
        c = self.config
        P = self.params
        B = instr.states.shape[0]
        table = self.embed_table
        M = table.shape[0]
        q = nx.matmul(nx.rms_norm(table, P["hyper.ca_norm"]), P["hyper.ca_q"])
        q = q.reshape(1, M, c.heads, c.head_dim).transpose(0, 2, 1, 3)
        q = nx.broadcast_to(q, (B, c.heads, M, c.head_dim))
        split = lambda x: x.reshape(B, -1, c.heads, c.head_dim).transpose(0, 2, 1, 3)
        k = split(nx.matmul(instr.states, P["hyper.ca_k"]))
        v = split(nx.matmul(instr.states, P["hyper.ca_v"]))
        out = attention(q, k, v, mask=instr.mask)
        out = out.transpose(0, 2, 1, 3).reshape(B, M, c.model_dim)
        return table + nx.matmul(out, P["hyper.ca_o"])

    def _mlp(self, kind: str, x: Tensor) -> Tensor:
        pre = f"hyper.mlp.{kind}."
        P = self.params
        h = nx.gelu(nx.matmul(x, P[pre + "w1"]) + P[pre + "b1"])
        return nx.matmul(h, P[pre + "w2"]) + P[pre + "b2"]

    def generate(self, instr: EncoderOutput) -> PeftSet:
        """Batched module set: every tensor has a leading batch axis."""
        c = self.config
        B = instr.states.shape[0]
        if instr.states.shape[1] == 0:
            raise ShapeError("cannot generate from an empty instruction")
        per_layer = [LayerAdaptation() for _ in range(c.total_layers)]
        if not self.index_map:
            return PeftSet(per_layer, frozenset(), c)
        rows = self.attend(instr)
        offset = 0
        d, h, k = c.model_dim, c.heads, c.head_dim
        for kind, slots in self.index_map.items():
            n = len(slots)
            out = self._mlp(kind, rows[:, offset:offset + n])
            offset += n
            if kind == "adapters":
                na = c.adapter_bottleneck
                out = out.reshape(B, c.total_layers, 2, na, d)
                for layer in range(c.total_layers):
                    down = out[:, layer, 0].T          # (B, d, n_a): one row per column
                    up = out[:, layer, 1]              # (B, n_a, d)
                    per_layer[layer].adapter = (down, up)
            elif kind == "prefixes":
                p = c.prefix_length
                out = out.reshape(B, len(prefix_sites(c)), 2, p, h, k)
                for s, (layer, site) in enumerate(prefix_sites(c)):
                    pair = (out[:, s, 0], out[:, s, 1])
                    if site == "self":
                        per_layer[layer].self_prefix = pair
                    else:
                        per_layer[layer].cross_prefix = pair
            elif kind == "lora":
                r = c.lora_rank
                out = out.reshape(B, c.total_layers, 2, 2, r, d)
                for layer in range(c.total_layers):
                    per_layer[layer].lora = {proj: (out[:, layer, j, 0].T, out[:, layer, j, 1])
                                             for j, proj in enumerate(("q", "v"))}
        return PeftSet(per_layer, frozenset(self.index_map), c)


CONTEXT_FORMAT = "task-context/1"


@dataclass
class TaskContext:
    """Everything cached for one task: instruction ids, encoded rows, modules."""

    task_id: str
    instruction_tokens: list[int]
    encoded_instruction: Tensor  # (t, d)
    peft: PeftSet | None
    fusion: bool = True

    def __post_init__(self):
        if self.encoded_instruction.shape[0] != len(self.instruction_tokens):
            raise ShapeError("encoded instruction rows must match instruction token count")

    def to_bytes(self, extra: dict | None = None) -> bytes:
        meta = {"format": CONTEXT_FORMAT, "task_id": self.task_id, "fusion": self.fusion,
                "instruction_tokens": list(self.instruction_tokens),
                "peft": None if self.peft is None else self.peft.meta(), "extra": extra or {}}
        arrays = {"encoded_instruction": self.encoded_instruction.data}
        if self.peft is not None:
            arrays.update({f"peft.{k}": v for k, v in self.peft.to_arrays().items()})
        return arrayio.dumps(meta, arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TaskContext":
        meta, arrays = arrayio.loads(blob)
        if meta.get("format") != CONTEXT_FORMAT:
            raise ValueError(f"unsupported task context format {meta.get('format')!r}")
        peft = None
        if meta["peft"] is not None:
            peft = PeftSet.from_arrays(meta["peft"], {k[5:]: v for k, v in arrays.items() if k.startswith("peft.")})
        return cls(meta["task_id"], meta["instruction_tokens"], Tensor(arrays["encoded_instruction"]), peft,
                   meta["fusion"])


class HintModel:
    """Underlying transformer plus its weight-tied hypernetwork."""

    def __init__(self, config: ModelConfig, hconfig: HyperConfig | None = None, seed: int = 0):
        self.config = config
        self.hconfig = hconfig or HyperConfig()
        self.params = Parameters()
        self.model = Transformer(config, self.params, seed=seed)
        self.hyper = HyperNetwork(config, self.hconfig, self.params, seed=seed + 1)

    # -- pieces -----------------------------------------------------------
    def hyper_encode(self, ids: np.ndarray, mask: np.ndarray | None = None) -> EncoderOutput:
        """Encode instructions with the shared encoder, nothing injected."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] == 0:
            raise ShapeError("instruction must be nonempty")
        return self.model.encode_batch(ids, mask, None)

    def generate_peft(self, encoded_instruction: EncoderOutput) -> PeftSet:
        return self.hyper.generate(encoded_instruction)

    @staticmethod
    def fuse(instr: EncoderOutput | None, inputs: EncoderOutput) -> EncoderOutput:
        """Row-concatenate encoded instruction ahead of encoded inputs."""
        if instr is None or instr.states.shape[1] == 0:
            return inputs
        B = inputs.states.shape[0]
        states = instr.states
        mask = instr.mask
        if states.shape[0] != B:
            if states.shape[0] != 1:
                raise ShapeError(f"instruction batch {states.shape[0]} vs input batch {B}")
            states = nx.broadcast_to(states, (B,) + states.shape[1:])
            mask = np.broadcast_to(mask, (B, mask.shape[1]))
        if states.shape[-1] != inputs.states.shape[-1]:
            raise ShapeError("instruction and input states differ in width")
        return EncoderOutput(nx.concat([states, inputs.states], axis=1),
                             np.concatenate([mask, inputs.mask], axis=1))

    # -- task contexts ----------------------------------------------------
    def build_task_context(self, instruction: str, fewshot_examples: Sequence[tuple[str, str]] = (),
                           task_id: str = "") -> TaskContext:
        if not instruction:
            raise ValueError("instruction must be nonempty")
        ids = hyper_input_ids(instruction, fewshot_examples)
        return self.context_from_ids(ids, task_id)

    def context_from_ids(self, ids: Sequence[int], task_id: str = "") -> TaskContext:
        if len(ids) > self.config.max_seq_len:
            raise SequenceLengthError(f"hypernetwork input of {len(ids)} tokens exceeds {self.config.max_seq_len}")
        with nx.no_grad():
            enc = self.hyper_encode(np.asarray([list(ids)]))
            peft = self.generate_peft(enc).item(0) if self.hyper.index_map else None
        return TaskContext(task_id, list(ids), Tensor(enc.states.data[0]), peft, self.hconfig.fusion)

    def fuse_and_decode(self, ctx: TaskContext, inputs: EncoderOutput, targets=None, max_len: int = 32):
        """Decode against ``[encoded instruction; inputs]`` with ctx modules attached.

        With ``targets`` (a ``(B, T)`` teacher-forcing id array) returns
        logits; otherwise greedy-decodes up to ``max_len`` tokens per row.
        """
        if ctx.encoded_instruction.shape[-1] != inputs.states.shape[-1]:
            raise ShapeError("context and inputs come from different model widths")
        source = inputs
        if ctx.fusion:
            rows = ctx.encoded_instruction
            instr = EncoderOutput(rows.reshape(1, *rows.shape), np.ones((1, rows.shape[0]), dtype=bool))
            source = self.fuse(instr, inputs)
        dec_ad = ctx.peft.decoder_layers() if ctx.peft is not None and ctx.peft.kinds else None
        if targets is not None:
            return self.model.decode_batch(source, targets, dec_ad)
        return self.model.greedy_decode_batch(source, dec_ad, max_len)

    def encode_inputs(self, ctx: TaskContext | None, ids: np.ndarray, mask: np.ndarray | None = None
                      ) -> EncoderOutput:
        enc_ad = ctx.peft.encoder_layers() if ctx is not None and ctx.peft is not None and ctx.peft.kinds else None
        return self.model.encode_batch(ids, mask, enc_ad)

    def predict(self, ctx: TaskContext | None, inputs: Sequence[Sequence[int]], max_len: int = 32
                ) -> list[list[int]]:
        """Greedy predictions for many inputs of one task (context reused)."""
        ids, mask = pad_batch(inputs)
        with nx.no_grad():
            enc = self.encode_inputs(ctx, ids, mask)
            if ctx is None:
                return self.model.greedy_decode_batch(enc, None, max_len)
            return self.fuse_and_decode(ctx, enc, max_len=max_len)

    # -- training forward ---------------------------------------------------
    def batch_forward(self, hyper_inputs: Sequence[Sequence[int]] | None, model_inputs, dec_in,
                      use_hyper: bool = True) -> Tensor:
        """Teacher-forced logits for a mixed-task batch, one module set per item."""
        ids, mask = pad_batch(model_inputs)
        if not use_hyper:
            enc = self.model.encode_batch(ids, mask, None)
            return self.model.decode_batch(enc, dec_in, None)
        h_ids, h_mask = pad_batch(hyper_inputs)
        instr = self.hyper_encode(h_ids, h_mask)
        peft = self.generate_peft(instr) if self.hyper.index_map else None
        enc_ad = peft.encoder_layers() if peft is not None else None
        dec_ad = peft.decoder_layers() if peft is not None else None
        enc = self.model.encode_batch(ids, mask, enc_ad)
        source = self.fuse(instr, enc) if self.hconfig.fusion else enc
        return self.model.decode_batch(source, dec_in, dec_ad)

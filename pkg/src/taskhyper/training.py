"""Pretraining, mixed-task finetuning, evaluation and checkpoints."""

from __future__ import annotations

import csv
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import arrayio
from . import numerics as nx
from .corpus import (
    SyntheticTask,
    chunk_split,
    corpus_windows,
    decode_ids,
    decoder_arrays,
    encode_text,
    format_example,
)
from .hypernet import HintModel, HyperConfig
from .transformer import ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "checkpoint/1"
SETTINGS = ("hint", "concat_baseline", "no_instruct")
ABLATIONS = ("no_fusion", "no_peft", "adapters_only", "prefixes_only", "lora_only")


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


class CheckpointError(ValueError):
    pass


class CorpusExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    mode: str = "finetune"
    setting: str = "hint"
    ablation: str | None = None
    train_shots: tuple[int, ...] = (0, 2)
    grad_clip: float = 1.0
    log_every: int = 50
    cycle_corpus: bool = True

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"mode must be pretrain or finetune, got {self.mode!r}")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.ablation is not None:
            if self.ablation not in ABLATIONS:
                raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
            if self.setting != "hint":
                raise ValueError("ablation flags are only valid with setting=hint")
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("steps >= 0, batch_size >= 1 and learning_rate > 0 required")
        object.__setattr__(self, "train_shots", tuple(int(k) for k in self.train_shots))

    @property
    def uses_hypernetwork(self) -> bool:
        return self.setting == "hint"

    def hyper_config(self) -> HyperConfig:
        if self.setting != "hint":
            return HyperConfig(kinds=(), fusion=False)
        kinds = {
            None: ("adapters", "prefixes"),
            "no_fusion": ("adapters", "prefixes"),
            "no_peft": (),
            "adapters_only": ("adapters",),
            "prefixes_only": ("prefixes",),
            "lora_only": ("lora",),
        }[self.ablation]
        return HyperConfig(kinds=kinds, fusion=self.ablation != "no_fusion")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_shots"] = list(self.train_shots)
        return d


@dataclass
class Batch:
    """Mixed-task batch: items may come from different tasks."""

    hyper_inputs: list[list[int]]
    model_inputs: list[list[int]]
    targets: list[list[int]]
    task_ids: list[str]

    def __len__(self):
        return len(self.targets)

    @classmethod
    def from_items(cls, items: Iterable[tuple[list[int], list[int], list[int], str]]) -> "Batch":
        h, m, t, ids = [], [], [], []
        for hi, mi, ti, tid in items:
            h.append(list(hi))
            m.append(list(mi))
            t.append(list(ti))
            ids.append(tid)
        return cls(h, m, t, ids)

    def subset(self, idx: Sequence[int]) -> "Batch":
        return Batch([self.hyper_inputs[i] for i in idx], [self.model_inputs[i] for i in idx],
                     [self.targets[i] for i in idx], [self.task_ids[i] for i in idx])


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    hconfig: HyperConfig
    arrays: dict[str, np.ndarray]
    info: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {"format": CHECKPOINT_FORMAT, "model_config": self.config.to_dict(),
                "hyper_config": self.hconfig.to_dict(), "info": self.info}

    def content_hash(self) -> str:
        return arrayio.content_hash(self.meta(), self.arrays)

    def save(self, path) -> Path:
        return arrayio.save(path, self.meta(), self.arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        meta, arrays = arrayio.load(path)
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
        return cls(ModelConfig.from_dict(meta["model_config"]), HyperConfig.from_dict(meta["hyper_config"]),
                   arrays, meta.get("info", {}))

    @classmethod
    def from_model(cls, model: HintModel, info: dict | None = None) -> "Checkpoint":
        return cls(model.config, model.hconfig, model.params.state(), dict(info or {}))

    def build(self, hconfig: HyperConfig | None = None, seed: int = 0) -> HintModel:
        """Instantiate a model; with a different ``hconfig`` shared parameters are reused."""
        hc = hconfig or self.hconfig
        model = HintModel(self.config, hc, seed=seed)
        state = self.arrays if hc == self.hconfig else {k: v for k, v in self.arrays.items() if k in model.params}
        model.params.load_state(state, strict=hc == self.hconfig)
        return model


def init_checkpoint(config: ModelConfig, hconfig: HyperConfig | None = None, seed: int = 0) -> Checkpoint:
    return Checkpoint.from_model(HintModel(config, hconfig, seed=seed), {"steps": 0, "seed": seed})


# -- optimisation -------------------------------------------------------------

class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params.items():
            g = grads[n]
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale to a global norm of at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {n: g * scale for n, g in grads.items()}
    return grads, norm


def batch_loss(model: HintModel, batch: Batch, use_hyper: bool = True):
    """Mean target-token cross-entropy and per-item mean losses."""
    dec_in, labels, mask = decoder_arrays(batch.targets)
    logits = model.batch_forward(batch.hyper_inputs if use_hyper else None, batch.model_inputs, dec_in,
                                 use_hyper=use_hyper)
    loss, per_pos = nx.cross_entropy(logits, labels, mask)
    per_item = per_pos.sum(axis=1) / mask.sum(axis=1)
    return loss, per_item


def item_losses(model: HintModel, batch: Batch, use_hyper: bool = True) -> np.ndarray:
    with nx.no_grad():
        return batch_loss(model, batch, use_hyper)[1]


def train_step(model: HintModel, batch: Batch, config: TrainConfig, optimizer: Adam, step: int = 0
               ) -> float:
    """One update over all parameters; the hypernetwork is rerun for the batch."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    model.params.zero_grad()
    loss, _ = batch_loss(model, batch, config.uses_hypernetwork)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergence(step, value)
    nx.backward(loss)
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in model.params.items()}
    grads, _ = clip_grads(grads, config.grad_clip)
    optimizer.step(grads)
    return value


def param_norm(model: HintModel) -> float:
    return float(np.sqrt(sum(float((t.data ** 2).sum()) for _, t in model.params.items())))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]

    def write_log(self, path) -> Path:
        return write_log_csv(self.log, path)


def write_log_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "loss", "wall_clock", "param_norm"])
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def _run(model: HintModel, batches: Iterable[Batch], config: TrainConfig, info: dict) -> TrainResult:
    opt = Adam(model.params.items(), lr=config.learning_rate)
    rows = []
    t0 = time.perf_counter()
    step = 0
    for step, batch in enumerate(batches, start=1):
        loss = train_step(model, batch, config, opt, step)
        if step % config.log_every == 0 or step == config.steps:
            rows.append({"step": step, "loss": loss, "wall_clock": round(time.perf_counter() - t0, 4),
                         "param_norm": param_norm(model)})
            log.info("%s step %d loss %.4f", config.mode, step, loss)
    info = dict(info, steps=step, train_config=config.to_dict())
    return TrainResult(Checkpoint.from_model(model, info), rows)


def pretrain_batches(text: str, config: TrainConfig):
    rng = np.random.default_rng([config.seed, 7])
    windows = corpus_windows(text, rng, cycle=config.cycle_corpus)
    for _ in range(config.steps):
        items = []
        for _ in range(config.batch_size):
            try:
                seq = next(windows)
            except StopIteration:
                raise CorpusExhausted("corpus exhausted with cycling disabled") from None
            ch = chunk_split(seq, rng)
            items.append((ch.a, ch.b, ch.c, "pretrain"))
        yield Batch.from_items(items)


def pretrain(model: HintModel, text: str, config: TrainConfig) -> TrainResult:
    """Chunk-level pretraining: a -> hypernetwork, b -> encoder, predict c."""
    config = replace(config, mode="pretrain")
    return _run(model, pretrain_batches(text, config), config, {"stage": "pretrain", "seed": config.seed})


def example_for_setting(task: SyntheticTask, instance: str, setting: str, k: int = 0, shots=None):
    if setting == "hint":
        mode = "def_plus_pos" if k > 0 else "def_only"
    else:
        mode = setting
    return format_example(task, instance, mode, k=k, shots=shots)


def finetune_batches(tasks: Sequence[SyntheticTask], config: TrainConfig):
    train = [t for t in tasks if t.split == "train"]
    if not train:
        raise ValueError("no training tasks")
    rng = np.random.default_rng([config.seed, 11])
    for _ in range(config.steps):
        items = []
        for _ in range(config.batch_size):
            task = train[int(rng.integers(len(train)))]
            inst = task.sample_training_input(rng)
            k = int(config.train_shots[int(rng.integers(len(config.train_shots)))])
            shots = None
            if k and config.setting != "no_instruct":
                pick = rng.choice(len(task.few_shot_pool), size=k, replace=False)
                shots = [task.few_shot_pool[int(i)] for i in pick]
            ex = example_for_setting(task, inst, config.setting, k, shots)
            items.append((ex.hyper_input, ex.model_input, ex.target, task.task_id))
        yield Batch.from_items(items)


def finetune(checkpoint: Checkpoint, tasks: Sequence[SyntheticTask], config: TrainConfig) -> TrainResult:
    config = replace(config, mode="finetune")
    model = checkpoint.build(config.hyper_config(), seed=config.seed)
    info = {"stage": "finetune", "seed": config.seed, "parent": checkpoint.content_hash(),
            "setting": config.setting, "ablation": config.ablation}
    return _run(model, finetune_batches(tasks, config), config, info)


# -- evaluation ---------------------------------------------------------------

def token_f1(pred: Sequence[int], gold: Sequence[int]) -> float:
    if not pred and not gold:
        return 1.0
    common = sum((Counter(pred) & Counter(gold)).values())
    if common == 0:
        return 0.0
    p = common / len(pred)
    r = common / len(gold)
    return 2 * p * r / (p + r)


@dataclass
class TaskScore:
    task_id: str
    split: str
    exact_match: float
    token_f1: float
    predictions: list[str]


def _max_len(pairs) -> int:
    return max(len(encode_text(g)) for _, g in pairs) + 4


def predict_task(model: HintModel, task: SyntheticTask, setting: str = "hint", k: int = 0,
                 cache: bool = True, pairs=None) -> list[str]:
    """Greedy predictions for a task's evaluation instances.

    HINT settings build one task context and reuse it for every instance
    unless ``cache`` is False, in which case it is rebuilt per instance.
    """
    pairs = pairs if pairs is not None else task.evaluation_pairs()
    max_len = _max_len(pairs)
    formatted = [example_for_setting(task, inst, setting, k) for inst, _ in pairs]
    if setting != "hint":
        preds = model.predict(None, [f.model_input for f in formatted], max_len)
    elif cache:
        ctx = model.context_from_ids(formatted[0].hyper_input, task.task_id)
        preds = model.predict(ctx, [f.model_input for f in formatted], max_len)
    else:
        preds = []
        for f in formatted:
            ctx = model.context_from_ids(f.hyper_input, task.task_id)
            preds += model.predict(ctx, [f.model_input], max_len)
    return [decode_ids(p) for p in preds]


def evaluate(model: HintModel, tasks: Sequence[SyntheticTask], setting: str = "hint", k: int = 0,
             cache: bool = True) -> list[TaskScore]:
    scores = []
    for task in tasks:
        pairs = task.evaluation_pairs()
        preds = predict_task(model, task, setting, k, cache, pairs)
        em = float(np.mean([p == g for p, (_, g) in zip(preds, pairs)]))
        f1 = float(np.mean([token_f1(encode_text(p), encode_text(g)) for p, (_, g) in zip(preds, pairs)]))
        scores.append(TaskScore(task.task_id, task.split, em, f1, preds))
    return scores


def mean_exact_match(scores: Sequence[TaskScore], split: str | None = None) -> float:
    sel = [s.exact_match for s in scores if split is None or s.split == split]
    return float(np.mean(sel)) if sel else float("nan")


def write_results_csv(scores: Sequence[TaskScore], path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = extra or {}
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(extra) + ["task_id", "split", "exact_match", "token_f1"])
        for s in scores:
            w.writerow(list(extra.values()) + [s.task_id, s.split, f"{s.exact_match:.4f}", f"{s.token_f1:.4f}"])
        for split in sorted({s.split for s in scores}):
            sel = [s for s in scores if s.split == split]
            w.writerow(list(extra.values()) + [f"ALL_{split}", split,
                                               f"{np.mean([s.exact_match for s in sel]):.4f}",
                                               f"{np.mean([s.token_f1 for s in sel]):.4f}"])
    return path

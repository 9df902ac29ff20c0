"""Byte tokenizer, (a, b, c) pretraining chunker and the synthetic task suite."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .transformer import BOS_ID, EOS_ID, PAD_ID, SEP_ID

VOCAB_SIZE = 260
ALPHABET = "abcdefghijklmnopqrstuvwxyz"
VOWELS = set("aeiou")
MANIFEST_FORMAT = "task-suite/1"


# -- tokenizer ---------------------------------------------------------------

def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_ids(ids: Sequence[int]) -> str:
    """Bytes up to the first EOS; other special ids are dropped."""
    out = bytearray()
    for t in ids:
        if t == EOS_ID:
            break
        if t < 256:
            out.append(int(t))
    return out.decode("utf-8", errors="replace")


def join_segments(segments: Sequence[Sequence[int]]) -> list[int]:
    out: list[int] = []
    for i, seg in enumerate(segments):
        if i:
            out.append(SEP_ID)
        out.extend(seg)
    return out


def hyper_input_ids(instruction: str, examples: Sequence[tuple[str, str]] = ()) -> list[int]:
    """Instruction followed by ``SEP in SEP out`` for each few-shot example."""
    segments = [encode_text(instruction)]
    for inp, out in examples:
        segments += [encode_text(inp), encode_text(out)]
    return join_segments(segments)


# -- pretraining chunks ------------------------------------------------------

class ChunkLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkTriple:
    a: list[int]
    b: list[int]
    c: list[int]

    def __post_init__(self):
        if not (self.a and self.b and self.c):
            raise ValueError("chunks must be nonempty")


def chunk_split(tokens: Sequence[int], rng: np.random.Generator) -> ChunkTriple:
    """Cut at two distinct interior positions drawn uniformly."""
    n = len(tokens)
    if n < 3:
        raise ChunkLengthError(f"need at least 3 tokens to chunk, got {n}")
    i, j = sorted(int(x) for x in rng.choice(np.arange(1, n), size=2, replace=False))
    tokens = list(tokens)
    return ChunkTriple(tokens[:i], tokens[i:j], tokens[j:])


def load_corpus(path: str | Path | None = None) -> str:
    if path is None:
        return resources.files("taskhyper").joinpath("data/corpus.txt").read_text(encoding="utf-8")
    return Path(path).read_text(encoding="utf-8")


def corpus_windows(text: str, rng: np.random.Generator, min_len: int = 24, max_len: int = 48,
                   cycle: bool = True, limit: int | None = None) -> Iterator[list[int]]:
    """Random byte windows from ``text``.

    With ``cycle=False`` the windows tile the text once in random order and
    the iterator ends when the text is used up.
    """
    ids = encode_text(text)
    if len(ids) < min_len:
        raise ChunkLengthError(f"corpus has {len(ids)} bytes, need at least {min_len}")
    emitted = 0
    if cycle:
        while limit is None or emitted < limit:
            size = int(rng.integers(min_len, max_len + 1))
            start = int(rng.integers(0, len(ids) - size + 1))
            emitted += 1
            yield ids[start:start + size]
    else:
        starts = np.arange(0, len(ids) - min_len + 1, max_len)
        for start in rng.permutation(starts):
            yield ids[int(start):int(start) + max_len]


# -- synthetic tasks ---------------------------------------------------------

def _rotate(s: str, k: int) -> str:
    k %= max(len(s), 1)
    return s[-k:] + s[:-k] if k else s


def _swap_pairs(s: str) -> str:
    chars = list(s)
    for i in range(0, len(chars) - 1, 2):
        chars[i], chars[i + 1] = chars[i + 1], chars[i]
    return "".join(chars)


FAMILIES: dict[str, Callable[..., Callable[[str], str]]] = {
    "reverse": lambda: lambda s: s[::-1],
    "uppercase": lambda: lambda s: s.upper(),
    "duplicate": lambda: lambda s: "".join(ch * 2 for ch in s),
    "rotate": lambda k: lambda s: _rotate(s, k),
    "strip_vowels": lambda: lambda s: "".join(ch for ch in s if ch not in VOWELS),
    "swap_pairs": lambda: lambda s: _swap_pairs(s),
    "sort": lambda: lambda s: "".join(sorted(s)),
    "append": lambda lit: lambda s: s + lit,
    "prepend": lambda lit: lambda s: lit + s,
    "replace": lambda old, new: lambda s: s.replace(old, new),
    "remove": lambda ch: lambda s: s.replace(ch, ""),
    "first_last": lambda: lambda s: s[0] + s[-1],
}


@dataclass
class SyntheticTask:
    task_id: str
    instruction: str
    family: str
    params: tuple = ()
    split: str = "train"
    seed: int = 0
    min_len: int = 3
    max_len: int = 7
    n_eval: int = 50
    n_fewshot: int = 8
    eval_instances: list[str] = field(default_factory=list)
    few_shot_pool: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self._fn = FAMILIES[self.family](*self.params)
        if not self.eval_instances:
            rng = np.random.default_rng([self.seed, 1])
            seen: set[str] = set()
            while len(seen) < self.n_eval + self.n_fewshot:
                seen.add(self._random_string(rng))
            ordered = sorted(seen)
            rng.shuffle(ordered)
            self.eval_instances = ordered[: self.n_eval]
            self.few_shot_pool = [(s, self.apply(s)) for s in ordered[self.n_eval:]]
        self._reserved = set(self.eval_instances) | {s for s, _ in self.few_shot_pool}

    def apply(self, s: str) -> str:
        return self._fn(s)

    def _random_string(self, rng) -> str:
        n = int(rng.integers(self.min_len, self.max_len + 1))
        return "".join(ALPHABET[i] for i in rng.integers(0, len(ALPHABET), size=n))

    def sample_training_input(self, rng: np.random.Generator) -> str:
        """A fresh input that is neither an evaluation nor a few-shot instance."""
        while True:
            s = self._random_string(rng)
            if s not in self._reserved:
                return s

    def evaluation_pairs(self) -> list[tuple[str, str]]:
        return [(s, self.apply(s)) for s in self.eval_instances]

    def to_manifest(self) -> dict:
        return {"task_id": self.task_id, "instruction": self.instruction, "family": self.family,
                "params": list(self.params), "split": self.split}


# (task_id, family, params, instruction, split)
_SUITE = [
    ("reverse", "reverse", (), "Reverse the order of the letters.", "train"),
    ("uppercase", "uppercase", (), "Rewrite every letter in uppercase.", "train"),
    ("duplicate", "duplicate", (), "Write every letter twice in a row.", "train"),
    ("rotate1", "rotate", (1,), "Rotate the word right by 1 place.", "train"),
    ("strip_vowels", "strip_vowels", (), "Remove all of the vowels.", "train"),
    ("swap_pairs", "swap_pairs", (), "Swap each pair of neighbouring letters.", "train"),
    ("append_xq", "append", ("xq",), "Append 'xq' to the end.", "train"),
    ("prepend_zb", "prepend", ("zb",), "Prepend 'zb' to the start.", "train"),
    ("append_kw", "append", ("kw",), "Append 'kw' to the end.", "train"),
    ("append_mo", "append", ("mo",), "Append 'mo' to the end.", "heldout"),
    ("prepend_gy", "prepend", ("gy",), "Prepend 'gy' to the start.", "heldout"),
    ("rotate2", "rotate", (2,), "Rotate the word right by 2 places.", "heldout"),
]


def make_task_suite(seed: int = 0) -> list[SyntheticTask]:
    return [SyntheticTask(tid, instr, fam, params, split, seed=seed * 1000 + i)
            for i, (tid, fam, params, instr, split) in enumerate(_SUITE)]


def split_tasks(tasks: Sequence[SyntheticTask], split: str) -> list[SyntheticTask]:
    return [t for t in tasks if t.split == split]


def write_manifest(tasks: Sequence[SyntheticTask], path: str | Path, seed: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"format": MANIFEST_FORMAT, "seed": seed, "tasks": [t.to_manifest() for t in tasks]}
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> list[SyntheticTask]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unsupported manifest format {doc.get('format')!r}")
    seed = doc.get("seed", 0)
    return [SyntheticTask(t["task_id"], t["instruction"], t["family"], tuple(t["params"]), t["split"],
                          seed=seed * 1000 + i)
            for i, t in enumerate(doc["tasks"])]


# -- example formatting ------------------------------------------------------

MODES = ("def_only", "def_plus_pos", "concat_baseline", "no_instruct")


class FewShotPoolError(ValueError):
    pass


@dataclass(frozen=True)
class Formatted:
    hyper_input: list[int]
    model_input: list[int]
    target: list[int]


def format_example(task: SyntheticTask, instance: str, mode: str = "def_only", k: int = 0,
                   shots: Sequence[tuple[str, str]] | None = None) -> Formatted:
    """Lay out one instance for a setting.

    ``def_plus_pos`` uses the first ``k`` few-shot pairs unless ``shots`` is
    given. ``concat_baseline`` puts the instruction (and any shots) ahead of
    the instance in the model input and leaves the hypernetwork input empty.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if shots is None:
        if k > len(task.few_shot_pool):
            raise FewShotPoolError(f"{task.task_id}: asked for {k} shots, pool has {len(task.few_shot_pool)}")
        shots = task.few_shot_pool[:k] if mode in ("def_plus_pos", "concat_baseline") else ()
    target = encode_text(task.apply(instance))
    inst = encode_text(instance)
    if mode == "def_only":
        return Formatted(hyper_input_ids(task.instruction), inst, target)
    if mode == "def_plus_pos":
        return Formatted(hyper_input_ids(task.instruction, shots), inst, target)
    if mode == "concat_baseline":
        return Formatted([], join_segments([hyper_input_ids(task.instruction, shots), inst]), target)
    return Formatted([], inst, target)


def pad_batch(seqs: Sequence[Sequence[int]], min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a ``(B, S)`` id array plus a boolean mask."""
    S = max(min_len, max((len(s) for s in seqs), default=0))
    ids = np.full((len(seqs), S), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), S), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def decoder_arrays(targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing inputs (BOS + target), labels (target + EOS) and label mask."""
    dec_in, _ = pad_batch([[BOS_ID] + list(t) for t in targets])
    labels, mask = pad_batch([list(t) + [EOS_ID] for t in targets])
    return dec_in, labels, mask

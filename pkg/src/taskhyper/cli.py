"""``taskhyper`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence during training.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import costmodel
from .corpus import ChunkLengthError, FewShotPoolError, load_corpus, make_task_suite, read_manifest, write_manifest
from .hypernet import TaskContext
from .numerics import ShapeError
from .transformer import ModelConfig, SequenceLengthError
from .training import (
    ABLATIONS,
    SETTINGS,
    Checkpoint,
    CheckpointError,
    CorpusExhausted,
    TrainConfig,
    TrainingDivergence,
    evaluate,
    example_for_setting,
    finetune,
    init_checkpoint,
    mean_exact_match,
    pretrain,
    write_results_csv,
)

log = logging.getLogger("taskhyper")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
MANIFEST_FORMAT = "run-manifest/1"
CONFIG_SECTIONS = ("model", "pretrain", "finetune", "data")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------

def _train_defaults(mode: str) -> TrainConfig:
    if mode == "pretrain":
        return TrainConfig(steps=300, mode="pretrain")
    return TrainConfig(steps=4000, mode="finetune")


def default_config() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["model"] = {k: str(v) for k, v in ModelConfig().to_dict().items()}
    for mode in ("pretrain", "finetune"):
        d = _train_defaults(mode).to_dict()
        d.pop("mode")
        d["ablation"] = d["ablation"] or ""
        d["train_shots"] = ",".join(str(k) for k in d["train_shots"])
        cp[mode] = {k: str(v) for k, v in d.items()}
    cp["data"] = {"corpus": "", "suite": "", "suite_seed": "0"}
    return cp


def load_config(path: str | None) -> configparser.ConfigParser:
    """Defaults overlaid with ``path``; unknown sections or keys are errors."""
    cp = default_config()
    if not path:
        return cp
    user = configparser.ConfigParser(interpolation=None)
    user.optionxform = str
    try:
        if not user.read(path, encoding="utf-8"):
            raise ConfigError(f"config file {path} not found")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    for sec in user.sections():
        if sec not in CONFIG_SECTIONS:
            raise ConfigError(f"{path}: unknown section [{sec}]")
        for key, value in user[sec].items():
            if key not in cp[sec]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{sec}]")
            cp[sec][key] = value
    return cp


def _typed(section, key: str, kind):
    raw = section[key]
    try:
        if kind is bool:
            return section.getboolean(key)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"[{section.name}] {key} = {raw!r}: {e}") from e


def model_config(cp) -> ModelConfig:
    sec = cp["model"]
    try:
        return ModelConfig(**{k: _typed(sec, k, int) for k in sec})
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[model] {e}") from e


def train_config(cp, mode: str) -> TrainConfig:
    sec = cp[mode]
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for key in sec:
        if key == "train_shots":
            try:
                values[key] = tuple(int(x) for x in sec[key].split(",") if x.strip())
            except ValueError as e:
                raise ConfigError(f"[{mode}] train_shots = {sec[key]!r}") from e
        elif key == "ablation":
            values[key] = sec[key] or None
        else:
            t = kinds[key]
            values[key] = _typed(sec, key, int if t == "int" else float if t == "float" else
                                 bool if t == "bool" else str)
    try:
        return TrainConfig(mode=mode, **values)
    except ValueError as e:
        raise ConfigError(f"[{mode}] {e}") from e


def load_tasks(cp, override: str | None = None):
    path = override or cp["data"]["suite"]
    if path:
        try:
            return read_manifest(path)
        except FileNotFoundError as e:
            raise DataError(f"suite manifest {path} not found") from e
        except (KeyError, json.JSONDecodeError) as e:
            raise DataError(f"suite manifest {path} is malformed: {e}") from e
    return make_task_suite(_typed(cp["data"], "suite_seed", int))


def config_snapshot(cp) -> dict:
    return {sec: dict(cp[sec]) for sec in cp.sections()}


# -- manifests -------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs_hash: str
    outputs: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        """Hash of everything that determines the outputs (outputs excluded)."""
        doc = {"format": MANIFEST_FORMAT, "command": self.command, "config": self.config, "seed": self.seed,
               "inputs_hash": self.inputs_hash}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def write(self, out_dir: Path) -> Path:
        doc = dict(asdict(self), format=MANIFEST_FORMAT, manifest_hash=self.hash)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _hash_text(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()


def _prepend_comment(path: Path, manifest_hash: str, marker: str = "#"):
    body = path.read_text(encoding="utf-8")
    line = f"{marker} manifest {manifest_hash}" + (" -->" if marker == "<!--" else "")
    path.write_text(line + "\n" + body, encoding="utf-8")


def _load_checkpoint(path: str) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except FileNotFoundError as e:
        raise DataError(f"checkpoint {path} not found") from e
    except (KeyError, OSError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise ConfigError(str(e)) from e
        raise DataError(f"checkpoint {path} is unreadable: {e}") from e


# -- commands --------------------------------------------------------------------

def cmd_show_config(args) -> int:
    cp = load_config(args.config)
    model_config(cp)
    train_config(cp, "pretrain")
    train_config(cp, "finetune")
    cp.write(sys.stdout)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cp = load_config(args.config)
    mc, tc = model_config(cp), train_config(cp, "pretrain")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        text = load_corpus(cp["data"]["corpus"] or None)
    except FileNotFoundError as e:
        raise DataError(f"corpus {cp['data']['corpus']} not found") from e
    init = init_checkpoint(mc, tc.hyper_config(), seed=tc.seed)
    manifest = RunManifest("pretrain", config_snapshot(cp), tc.seed, _hash_text(text, init.content_hash()))
    model = init.build()
    try:
        result = pretrain(model, text, tc)
    except ChunkLengthError as e:
        raise DataError(str(e)) from e
    result.checkpoint.info["manifest"] = manifest.hash
    _finish_training(result, manifest, out)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cp = load_config(args.config)
    tc = train_config(cp, "finetune")
    ckpt = _load_checkpoint(args.checkpoint)
    mc = model_config(cp)
    if args.config and cp.has_section("model") and mc != ckpt.config:
        raise ConfigError(f"checkpoint model config {ckpt.config.to_dict()} differs from [model] in {args.config}")
    tasks = load_tasks(cp, args.suite)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suite_path = write_manifest(tasks, out / "suite.json")
    manifest = RunManifest("finetune", config_snapshot(cp), tc.seed,
                           _hash_text(ckpt.content_hash(), suite_path.read_text(encoding="utf-8")))
    result = finetune(ckpt, tasks, tc)
    result.checkpoint.info["manifest"] = manifest.hash
    _finish_training(result, manifest, out)
    return EXIT_OK


def _finish_training(result, manifest: RunManifest, out: Path):
    ckpt_path = result.checkpoint.save(out / "checkpoint.ckpt")
    log_path = result.write_log(out / "log.csv")
    _prepend_comment(log_path, manifest.hash)
    manifest.outputs = {"checkpoint": ckpt_path.name, "checkpoint_hash": result.checkpoint.content_hash(),
                        "log": log_path.name}
    manifest.write(out)
    print(f"checkpoint {ckpt_path} ({manifest.outputs['checkpoint_hash'][:12]})")


def cmd_eval(args) -> int:
    cp = load_config(args.config)
    ckpt = _load_checkpoint(args.checkpoint)
    tasks = load_tasks(cp, args.suite)
    if args.split != "all":
        tasks = [t for t in tasks if t.split == args.split]
    model = ckpt.build()
    setting = args.setting or ckpt.info.get("setting", "hint")
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}")
    if setting == "hint" and args.cache_dir:
        scores = _evaluate_cached(model, tasks, args.shots, Path(args.cache_dir), ckpt.content_hash())
    else:
        try:
            scores = evaluate(model, tasks, setting, args.shots, cache=not args.no_cache)
        except FewShotPoolError as e:
            raise DataError(str(e)) from e
    suite_doc = json.dumps([t.to_manifest() for t in tasks], sort_keys=True)
    run = {"setting": setting, "shots": args.shots, "split": args.split, "cache": not args.no_cache}
    manifest = RunManifest("eval", {"run": {k: str(v) for k, v in run.items()}}, 0,
                           _hash_text(ckpt.content_hash(), suite_doc))
    out = Path(args.out)
    write_results_csv(scores, out, extra={"setting": setting, "shots": args.shots})
    _prepend_comment(out, manifest.hash)
    for split in ("train", "heldout"):
        em = mean_exact_match(scores, split)
        if em == em:
            print(f"{split}: exact match {em:.3f}")
    return EXIT_OK


def _evaluate_cached(model, tasks, k: int, cache_dir: Path, ckpt_hash: str):
    """Evaluate using contexts from ``cache_dir``, building any that are missing."""
    from .training import TaskScore, _max_len, token_f1
    from .corpus import decode_ids, encode_text
    import numpy as np

    scores = []
    for task in tasks:
        ctx = _cached_context(model, task, k, cache_dir, ckpt_hash)
        pairs = task.evaluation_pairs()
        inputs = [example_for_setting(task, inst, "hint", k).model_input for inst, _ in pairs]
        preds = [decode_ids(p) for p in model.predict(ctx, inputs, _max_len(pairs))]
        em = float(np.mean([p == g for p, (_, g) in zip(preds, pairs)]))
        f1 = float(np.mean([token_f1(encode_text(p), encode_text(g)) for p, (_, g) in zip(preds, pairs)]))
        scores.append(TaskScore(task.task_id, task.split, em, f1, preds))
    return scores


def _context_path(cache_dir: Path, task_id: str, k: int) -> Path:
    return cache_dir / f"{task_id}.k{k}.ctx"


def _cached_context(model, task, k: int, cache_dir: Path, ckpt_hash: str) -> TaskContext:
    path = _context_path(cache_dir, task.task_id, k)
    if path.exists():
        ctx, extra = _read_context(path)
        if extra.get("checkpoint") == ckpt_hash:
            return ctx
    hyper = example_for_setting(task, task.eval_instances[0], "hint", k).hyper_input
    ctx = model.context_from_ids(hyper, task.task_id)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ctx.to_bytes({"checkpoint": ckpt_hash, "shots": k}))
    return ctx


def _read_context(path: Path):
    from . import arrayio

    blob = path.read_bytes()
    meta, _ = arrayio.loads(blob)
    return TaskContext.from_bytes(blob), meta.get("extra", {})


def cmd_cache(args) -> int:
    cache_dir = Path(args.dir)
    if args.action == "warm":
        cp = load_config(args.config)
        ckpt = _load_checkpoint(args.checkpoint)
        model = ckpt.build()
        if not model.hyper.index_map and not model.hconfig.fusion:
            raise ConfigError("checkpoint has no hypernetwork path to cache")
        h = ckpt.content_hash()
        for task in load_tasks(cp, args.suite):
            _cached_context(model, task, args.shots, cache_dir, h)
            print(f"warm {task.task_id}")
    elif args.action == "list":
        for path in sorted(cache_dir.glob("*.ctx")):
            ctx, extra = _read_context(path)
            kinds = ",".join(sorted(ctx.peft.kinds)) if ctx.peft is not None else "-"
            print(f"{ctx.task_id}\tshots={extra.get('shots')}\ttokens={len(ctx.instruction_tokens)}\t"
                  f"modules={kinds}\tcheckpoint={str(extra.get('checkpoint'))[:12]}")
    else:
        targets = sorted(cache_dir.glob("*.ctx"))
        if args.task:
            targets = [p for p in targets if p.name.split(".k")[0] == args.task]
        for p in targets:
            p.unlink()
            print(f"evicted {p.name}")
    return EXIT_OK


def cmd_cost_report(args) -> int:
    if args.N is not None:
        base = dict(N=args.N, N_prime=args.N_prime, A=args.A, n=args.n, o=args.o, i=args.i)
        scenarios = [costmodel.CostScenario(t=args.t, method="concat", name="concat", **base),
                     costmodel.CostScenario(t=args.t, method="hint", name="hint", **base)]
        reference = "concat"
    else:
        preset = costmodel.load_preset(args.preset, args.presets)
        scenarios, reference = preset.scenarios, preset.reference
    reports = costmodel.relative_flops_table(scenarios, reference)
    ref = next(s for s in scenarios if s.name == reference)
    sweep = costmodel.t_sweep(ref, range(0, args.t_max + 1, args.t_step))
    payload = json.dumps({"scenarios": [asdict(s) for s in scenarios], "reference": reference,
                          "t_max": args.t_max, "t_step": args.t_step}, sort_keys=True)
    manifest = RunManifest("cost-report", {}, 0, _hash_text(payload))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "relative_flops.csv").write_text(f"# manifest {manifest.hash}\n" + costmodel.reports_csv(reports))
    (out / "relative_flops.md").write_text(f"<!-- manifest {manifest.hash} -->\n"
                                          + costmodel.reports_markdown(reports))
    (out / "t_sweep.csv").write_text(f"# manifest {manifest.hash}\n"
                                     + costmodel.to_csv(sweep, costmodel.SWEEP_COLUMNS))
    manifest.outputs = {"table_csv": "relative_flops.csv", "table_md": "relative_flops.md",
                        "sweep_csv": "t_sweep.csv"}
    manifest.write(out)
    print(costmodel.reports_markdown(reports), end="")
    return EXIT_OK


def cmd_latency_bench(args) -> int:
    from .bench import latency_bench, write_timing_csv

    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.build()
    shots = [int(x) for x in args.shots.split(",")]
    rows = latency_bench(model, shots, args.n_examples, args.repetitions, args.batch_size)
    run = {"shots": args.shots, "n_examples": args.n_examples, "repetitions": args.repetitions}
    manifest = RunManifest("latency-bench", {"run": {k: str(v) for k, v in run.items()}}, 0,
                           ckpt.content_hash())
    write_timing_csv(rows, args.out, manifest.hash)
    for r in rows:
        print(f"shots={r['shots']} {r['mode']:<16} median {r['median_ms']:.1f} ms  p90 {r['p90_ms']:.1f} ms")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taskhyper", description="Instruction-conditioned hypernetworks at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("show-config", help="print the effective configuration")
    s.add_argument("--config")
    s.set_defaults(func=cmd_show_config)

    s = sub.add_parser("pretrain", help="chunk-level pretraining from scratch")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="mixed-task finetuning on the training tasks")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--suite", help="task-suite manifest (defaults to the built-in suite)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="exact match and token F1 per task")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--suite")
    s.add_argument("--setting", choices=SETTINGS, help="defaults to the setting the checkpoint was trained with")
    s.add_argument("--shots", type=int, default=0)
    s.add_argument("--split", choices=("train", "heldout", "all"), default="all")
    s.add_argument("--no-cache", action="store_true", help="rebuild the task context for every example")
    s.add_argument("--cache-dir", help="reuse serialized task contexts from this directory")
    s.add_argument("--out", required=True, help="results CSV path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cost-report", help="analytic relative-FLOPs table and t sweep")
    s.add_argument("--preset", default="sni")
    s.add_argument("--presets", help="preset INI file (defaults to the bundled one)")
    s.add_argument("--N", type=float, help="custom scenario: model parameters (overrides --preset)")
    s.add_argument("--N-prime", dest="N_prime", type=float, default=0.0)
    s.add_argument("--A", type=float, default=0.0)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--t", type=int, default=69)
    s.add_argument("--i", type=int, default=44)
    s.add_argument("--o", type=int, default=1)
    s.add_argument("--t-max", type=int, default=512)
    s.add_argument("--t-step", type=int, default=16)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_cost_report)

    s = sub.add_parser("latency-bench", help="wall clock of HINT vs concatenated instructions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--shots", default="0,1,2,3")
    s.add_argument("--n-examples", type=int, default=100)
    s.add_argument("--repetitions", type=int, default=5)
    s.add_argument("--batch-size", type=int, default=25)
    s.add_argument("--out", required=True, help="timing CSV path")
    s.set_defaults(func=cmd_latency_bench)

    s = sub.add_parser("cache", help="manage serialized per-task contexts")
    s.add_argument("action", choices=("warm", "list", "evict"))
    s.add_argument("--dir", required=True)
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--suite")
    s.add_argument("--shots", type=int, default=0)
    s.add_argument("--task", help="evict only this task id")
    s.set_defaults(func=cmd_cache)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "cache" and args.action == "warm" and not args.checkpoint:
        parser.error("cache warm needs --checkpoint")
    try:
        return args.func(args)
    except (ConfigError, costmodel.CostConfigError, ShapeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ChunkLengthError, CorpusExhausted, FewShotPoolError, SequenceLengthError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

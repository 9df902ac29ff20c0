import numpy as np
import pytest

from taskhyper import arrayio
from taskhyper import numerics as nx
from taskhyper.corpus import make_task_suite
from taskhyper.hypernet import HintModel, HyperConfig
from taskhyper.training import (
    Adam,
    Batch,
    Checkpoint,
    CheckpointError,
    CorpusExhausted,
    TaskScore,
    TrainConfig,
    TrainingDivergence,
    batch_loss,
    clip_grads,
    evaluate,
    finetune,
    finetune_batches,
    init_checkpoint,
    item_losses,
    mean_exact_match,
    predict_task,
    pretrain,
    token_f1,
    train_step,
    write_log_csv,
    write_results_csv,
)
from taskhyper.transformer import BOS_ID, EOS_ID


def _batch(n=4, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        items.append((rng.integers(97, 123, size=int(rng.integers(2, 6))).tolist(),
                      rng.integers(97, 123, size=int(rng.integers(2, 6))).tolist(),
                      rng.integers(97, 123, size=int(rng.integers(1, 4))).tolist(), f"t{i % 2}"))
    return Batch.from_items(items)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(setting="concat_baseline", ablation="no_fusion")
    with pytest.raises(ValueError):
        TrainConfig(ablation="bogus")
    with pytest.raises(ValueError):
        TrainConfig(mode="serve")
    assert TrainConfig(ablation="no_peft").hyper_config().kinds == ()
    assert TrainConfig(ablation="no_fusion").hyper_config().fusion is False
    assert TrainConfig(setting="no_instruct").hyper_config() == HyperConfig(kinds=(), fusion=False)


def test_uniform_logits_loss_is_log_vocab(tiny_config):
    hm = HintModel(tiny_config)
    hm.params["model.lm_head"].data[...] = 0.0
    batch = Batch.from_items([([97], [98], [], "t")])
    loss, per = batch_loss(hm, batch)
    assert loss.item() == pytest.approx(np.log(tiny_config.vocab_size), rel=1e-12)


def test_overfit_one_task_loss_decreases(tiny_config):
    hm = HintModel(tiny_config, seed=0)
    cfg = TrainConfig(steps=50, batch_size=4)
    opt = Adam(hm.params.items(), lr=1e-3)
    batch = Batch.from_items([(list(b"Reverse."), list(b"abc"), list(b"cba"), "rev")] * 4)
    losses = [train_step(hm, batch, cfg, opt, s) for s in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_gradients_reach_both_networks(tiny_config):
    hm = HintModel(tiny_config, seed=0)
    loss, _ = batch_loss(hm, _batch())
    nx.backward(loss)
    for prefix in ("hyper.embed", "hyper.mlp", "hyper.ca_", "model.enc0", "model.dec1", "model.lm_head"):
        norm = sum(float(np.abs(p.grad).sum()) for n, p in hm.params.items()
                   if n.startswith(prefix) and p.grad is not None)
        assert norm > 0, prefix


def test_every_parameter_group_updates(tiny_config):
    hm = HintModel(tiny_config, HyperConfig(kinds=("adapters", "prefixes", "lora")), seed=0)
    before = hm.params.state()
    cfg = TrainConfig(steps=10, batch_size=4)
    opt = Adam(hm.params.items())
    for s in range(10):
        train_step(hm, _batch(seed=s), cfg, opt, s)
    stale = [n for n, p in hm.params.items()
             if np.array_equal(p.data, before[n]) and not n.endswith("_pos")]
    assert stale == []


def test_divergence_raises(tiny_config):
    hm = HintModel(tiny_config)
    hm.params["model.lm_head"].data[0, 0] = np.nan
    with pytest.raises(TrainingDivergence) as e:
        train_step(hm, _batch(), TrainConfig(), Adam(hm.params.items()), step=7)
    assert e.value.step == 7


def test_clip_grads_is_pure():
    g = {"a": np.array([3.0, 4.0])}
    out, norm = clip_grads(g, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(out["a"], [0.6, 0.8])
    np.testing.assert_array_equal(g["a"], [3.0, 4.0])
    same, _ = clip_grads(g, 10.0)
    assert same["a"] is g["a"]


def test_mixed_batch_losses_match_single_items(tiny_config):
    hm = HintModel(tiny_config, seed=1)
    batch = _batch(6)
    mixed = item_losses(hm, batch)
    for i in range(len(batch)):
        single = item_losses(hm, batch.subset([i]))
        assert abs(single[0] - mixed[i]) < 1e-9


def test_pretrain_zero_steps_is_init(tiny_config):
    init = init_checkpoint(tiny_config, seed=0)
    res = pretrain(init.build(), "some text that is long enough to cut up. " * 3, TrainConfig(steps=0))
    for name, arr in init.arrays.items():
        np.testing.assert_array_equal(res.checkpoint.arrays[name], arr)


def test_pretrain_loss_goes_down(tiny_config):
    hm = HintModel(tiny_config)
    text = "the quick brown fox jumps over the lazy dog. " * 20
    res = pretrain(hm, text, TrainConfig(steps=40, batch_size=8, log_every=10))
    assert res.log[-1]["loss"] < res.log[0]["loss"]
    assert [r["step"] for r in res.log] == [10, 20, 30, 40]


def test_corpus_exhaustion(tiny_config):
    hm = HintModel(tiny_config)
    with pytest.raises(CorpusExhausted):
        pretrain(hm, "x" * 60, TrainConfig(steps=5, batch_size=4, cycle_corpus=False))


def test_checkpoint_round_trip_is_bit_identical(tiny_config, tmp_path):
    ck = init_checkpoint(tiny_config, seed=3)
    p = ck.save(tmp_path / "a.ckpt")
    again = Checkpoint.load(p)
    again.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert again.content_hash() == ck.content_hash()
    meta, arrays = arrayio.load(p)
    arrayio.save(tmp_path / "c.ckpt", dict(meta, format="checkpoint/9"), arrays)
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "c.ckpt")


def test_finetune_is_seed_deterministic(tiny_config):
    tasks = make_task_suite(0)
    ck = init_checkpoint(tiny_config)
    cfg = TrainConfig(steps=3, batch_size=4)
    a = finetune(ck, tasks, cfg).checkpoint
    b = finetune(ck, tasks, cfg).checkpoint
    assert a.content_hash() == b.content_hash()
    assert a.info["parent"] == ck.content_hash()


def test_finetune_batches_are_mixed_and_train_only():
    tasks = make_task_suite(0)
    held = {t.task_id for t in tasks if t.split == "heldout"}
    reserved = {s for t in tasks for s in t.eval_instances}
    ids = set()
    for batch in finetune_batches(tasks, TrainConfig(steps=20, batch_size=8)):
        ids |= set(batch.task_ids)
        assert len(set(batch.task_ids)) > 1
        for inp in batch.model_inputs:
            assert bytes(inp).decode() not in reserved
    assert not ids & held
    assert len(ids) == 9


def test_ablation_builds_from_full_checkpoint(tiny_config):
    ck = init_checkpoint(tiny_config)
    for ablation in ("adapters_only", "prefixes_only", "lora_only", "no_fusion", "no_peft"):
        cfg = TrainConfig(steps=1, batch_size=2, ablation=ablation)
        out = finetune(ck, make_task_suite(0), cfg)
        assert out.checkpoint.hconfig == cfg.hyper_config()


def test_cached_and_uncached_predictions_agree(tiny_config):
    hm = HintModel(tiny_config, seed=5)
    task = make_task_suite(0)[0]
    pairs = task.evaluation_pairs()[:5]
    assert predict_task(hm, task, "hint", 2, True, pairs) == predict_task(hm, task, "hint", 2, False, pairs)


def test_metrics():
    assert token_f1([1, 2], [1, 2]) == 1.0
    assert token_f1([], []) == 1.0
    assert token_f1([3], [1]) == 0.0
    assert token_f1([1, 1, 2], [1, 2, 2]) == pytest.approx(2 / 3)
    scores = [TaskScore("a", "train", 1.0, 1.0, []), TaskScore("b", "heldout", 0.0, 0.5, [])]
    assert mean_exact_match(scores, "train") == 1.0
    assert mean_exact_match(scores) == 0.5


class _Oracle(HintModel):
    """Answers with the gold output (or nothing); isolates the scoring code."""

    def __init__(self, config, answers):
        super().__init__(config)
        self.answers = answers

    def predict(self, ctx, inputs, max_len=32):
        return [list(self.answers(bytes(i).decode())) for i in inputs]


def test_evaluate_perfect_and_empty(tiny_config, tmp_path):
    tasks = [make_task_suite(0)[0]]
    perfect = evaluate(_Oracle(tiny_config, lambda s: tasks[0].apply(s).encode()), tasks, "no_instruct")
    assert perfect[0].exact_match == 1.0 and perfect[0].token_f1 == 1.0
    empty = evaluate(_Oracle(tiny_config, lambda s: b""), tasks, "no_instruct")
    assert empty[0].exact_match == 0.0
    path = write_results_csv(perfect + empty, tmp_path / "r.csv", extra={"setting": "x"})
    lines = path.read_text().splitlines()
    assert lines[0] == "setting,task_id,split,exact_match,token_f1"
    assert lines[-1].startswith("x,ALL_train,train,0.5000")


def test_log_csv(tmp_path):
    p = write_log_csv([{"step": 1, "loss": 2.0, "wall_clock": 0.1, "param_norm": 3.0}], tmp_path / "log.csv")
    assert p.read_text().splitlines()[0] == "step,loss,wall_clock,param_norm"

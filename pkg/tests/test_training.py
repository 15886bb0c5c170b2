import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tdsnet.config import tiny_config
from tdsnet.nn import ParamStore
from tdsnet.tensor import Tensor, precision
from tdsnet.training import (AdamState, NonFiniteLossError, Trainer, adam_step, branch_loss, clip_grad_norm,
                             learning_rate, read_checkpoint, read_metrics, rescale, total_loss)


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype="float64")


def test_branch_loss_cases():
    assert float(branch_loss(t([0, 0, 1, 0]), [2]).data) == 0.0
    assert float(branch_loss(t([0.5] * 5), [0]).data) == pytest.approx(1.25)
    two = t([[0.5] * 5, [0, 1, 0, 0, 0]])
    assert float(branch_loss(two, [0, 1]).data) == pytest.approx(0.625)
    assert float(branch_loss(two, [0, 1], "sum").data) == pytest.approx(1.25)
    with pytest.raises(ValueError):
        branch_loss(t([0.2, 0.8]), [2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(0, 2), st.permutations([0, 1, 2]))
def test_branch_loss_permutation_invariant(scores, label, perm):
    a = float(branch_loss(t(scores), [label]).data)
    b = float(branch_loss(t(np.array(scores)[list(perm)]), [list(perm).index(label)]).data)
    assert a == pytest.approx(b)


def test_rescale_maps_cosine_range():
    np.testing.assert_allclose(rescale(t([-1.0, 0.0, 1.0])).data, [0.0, 0.5, 1.0])


def test_total_loss_arithmetic_and_nonfinite():
    lb = total_loss(t(1.0), t(1.0), t(0.5), lam=0.4)
    assert float(lb.total.data) == pytest.approx(2.2)
    with pytest.raises(NonFiniteLossError, match="loss_l"):
        total_loss(t(1.0), t(np.nan), t(0.5))


def test_learning_rate_schedule():
    assert learning_rate(0) == 0.001
    assert learning_rate(99_999) == 0.001
    assert learning_rate(100_000) == 0.0005
    assert learning_rate(250_000) == 0.00025


def store(w):
    return ParamStore({"w": w})


def test_adam_zero_gradient_and_first_step():
    with precision("float64"):
        w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        w.grad = np.zeros(2)
        adam_step(store(w), AdamState(), 0.1)
        np.testing.assert_array_equal(w.data, [1.0, -2.0])
        w.grad = np.array([3.0, -0.5])
        adam_step(store(w), AdamState(), 0.1)
        np.testing.assert_allclose(w.data, [0.9, -1.9], atol=1e-6)


def test_adam_quadratic_bowl():
    with precision("float64"):
        w = Tensor(np.array([1.5, -2.0, 0.7]), requires_grad=True)
        state = AdamState()
        for step in range(500):
            w.zero_grad()
            (w * w).sum().backward()
            adam_step(store(w), state, 0.05)
            if np.linalg.norm(w.data) < 1e-3:
                break
    assert np.linalg.norm(w.data) < 1e-3 and state.step <= 500


def test_clip_grad_norm():
    w = Tensor(np.zeros(2), requires_grad=True, dtype="float64")
    w.grad = np.array([3.0, 4.0])
    assert clip_grad_norm(store(w), 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(w.grad, [0.6, 0.8])


def tiny_run(root, **changes):
    base = dict(image_size=16, epochs=2, episodes_per_epoch=5, q_per=2, eval_q_per=2, val_episodes=3,
                data_root=str(root))
    base.update(changes)
    return tiny_config(**base)


def test_tiny_training_loss_decreases(small_dataset, tmp_path):
    root, idx = small_dataset
    cfg = tiny_run(root, epochs=1, episodes_per_epoch=50, lr=0.005)
    result = Trainer(cfg, idx, tmp_path).run()
    losses = [r["loss_total"] for r in read_metrics(result.log_path)]
    assert len(losses) == 50 and all(np.isfinite(losses))
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_metrics_schema_and_checkpoints(small_dataset, tmp_path):
    root, idx = small_dataset
    result = Trainer(tiny_run(root, lam=0.0), idx, tmp_path).run()
    rec = read_metrics(result.log_path)[0]
    assert {"episode", "loss_g", "loss_l", "loss_kl", "loss_total", "lr", "acc"} <= set(rec)
    assert rec["loss_kl_weighted"] == 0.0
    assert sorted(p.name for p in tmp_path.glob("epoch_*.ckpt")) == ["epoch_0001.ckpt", "epoch_0002.ckpt"]
    header, cfg, _, opt = read_checkpoint(tmp_path / "latest.ckpt")
    assert header["episode_counter"] == 10 and opt.step == 10 and header["config_digest"] == cfg.digest()


def test_best_checkpoint_with_validation_split(tmp_path):
    from tdsnet.episodes import SyntheticSpec, generate_synthetic
    idx = generate_synthetic(SyntheticSpec(image_size=16, n_classes=9, n_auxiliary=5, n_val=2,
                                           images_per_class=5, seed=1), tmp_path / "data")
    result = Trainer(tiny_run(tmp_path / "data"), idx, tmp_path / "run").run()
    assert (tmp_path / "run" / "best.ckpt").exists() and result.best_val is not None


def test_bit_identical_runs_and_resume(small_dataset, tmp_path):
    root, idx = small_dataset
    cfg = tiny_run(root)
    Trainer(cfg, idx, tmp_path / "a").run()
    Trainer(cfg, idx, tmp_path / "b").run()
    assert (tmp_path / "a" / "latest.ckpt").read_bytes() == (tmp_path / "b" / "latest.ckpt").read_bytes()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    Trainer(cfg, idx, tmp_path / "c").run(stop_after=7)  # stops mid-epoch, after the first checkpoint
    Trainer.resume(tmp_path / "c" / "epoch_0001.ckpt", idx, tmp_path / "c").run()
    assert (tmp_path / "a" / "latest.ckpt").read_bytes() == (tmp_path / "c" / "latest.ckpt").read_bytes()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "c" / "metrics.jsonl").read_bytes()


def test_nonfinite_loss_writes_dump(small_dataset, tmp_path):
    root, idx = small_dataset
    trainer = Trainer(tiny_run(root), idx, tmp_path)
    trainer.output_dir.mkdir(exist_ok=True)
    for p in trainer.model.param_store().values():
        p.data = np.full_like(p.data, np.nan)
    with pytest.raises(NonFiniteLossError):
        trainer.train_episode(0)
    assert (tmp_path / "crash_dump.ckpt").exists()

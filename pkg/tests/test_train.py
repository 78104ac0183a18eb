import numpy as np
import pytest
from hypothesis import given, strategies as st

from liverseg.autodiff import ShapeMismatch
from liverseg.model import LiverFormerConfig, SegmentationModel, build_model
from liverseg.phantom import PhantomConfig, generate_dataset
from liverseg.train import (
    AdamState,
    TooFewCases,
    TrainConfig,
    adam_step,
    evaluate_dice,
    format_log,
    lr_at,
    mean_foreground_dice,
    split_dataset,
    split_sizes,
    train_loop,
)

from oracles import adam_oracle

SMALL_PHANTOM = PhantomConfig(dims=(8, 16, 16), warp_magnitude=1.0)
SMALL_MODEL = LiverFormerConfig(input_dims=(8, 16, 16), hidden_dim=32, transformer_layers=1)


@pytest.fixture(scope="module")
def cases():
    return generate_dataset(3, SMALL_PHANTOM, base_seed=20)


def test_lr_schedule_exact():
    cfg = TrainConfig()
    assert [lr_at(e, cfg) for e in (0, 49, 50, 100, 150)] == [1e-3, 1e-3, 1e-4, 1e-5, 1e-6]
    assert lr_at(99, cfg) == 1e-4
    odd = TrainConfig(decay_factor=0.5, decay_every=2)
    assert lr_at(5, odd) == pytest.approx(1e-3 / 4)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_train_config_validation():
    for bad in (dict(decay_factor=0), dict(batch_size=2), dict(epochs=0), dict(lr0=-1),
                dict(split_ratios=(0.5, 0.5, 0.5))):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_adam_zero_grad_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 1e-3, 1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    adam_step(p, {}, AdamState(), 1e-3, 1)  # missing gradient = zero
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": np.array([5.0, -0.01, 300.0])}, AdamState(), 1e-3, 1)
    np.testing.assert_allclose(p["w"], [-1e-3, 1e-3, -1e-3], rtol=1e-6)


def test_adam_matches_oracle_trajectory():
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    p = {"w": np.array([0.5])}
    state = AdamState()
    got = []
    for t, g in enumerate(grads, 1):
        adam_step(p, {"w": np.array([g])}, state, 0.01, t)
        got.append(p["w"][0])
    np.testing.assert_allclose(got, adam_oracle(0.5, grads, 0.01), atol=1e-9)
    assert state.t == 5


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 1e-3, 1)


def test_split_sizes():
    cfg = TrainConfig()
    assert split_sizes(123, cfg.split_ratios) == (87, 18, 18)
    assert split_sizes(3, (1 / 3, 1 / 3, 1 / 3)) == (1, 1, 1)
    assert split_sizes(3, cfg.split_ratios) == (2, 1, 0)
    assert split_sizes(10, (0.5, 0.25, 0.25)) == (5, 3, 2)


@given(st.integers(3, 500))
def test_split_sizes_sum(n):
    sizes = split_sizes(n, TrainConfig().split_ratios)
    assert sum(sizes) == n and min(sizes) >= 0


def test_split_dataset_deterministic_and_disjoint():
    items = list(range(123))
    a = split_dataset(items, TrainConfig().split_ratios, 0)
    b = split_dataset(items, TrainConfig().split_ratios, 0)
    assert a == b
    assert [len(s) for s in a] == [87, 18, 18]
    assert sorted(sum(a, [])) == items
    assert split_dataset(items, TrainConfig().split_ratios, 1) != a
    with pytest.raises(TooFewCases):
        split_dataset([1, 2], TrainConfig().split_ratios, 0)


def test_mean_foreground_dice():
    x = np.arange(10).reshape(1, 2, 5)
    assert mean_foreground_dice(x, x) == 1.0
    y = x.copy()
    y[0, 0, 1] = 0  # class 1 vanishes
    assert mean_foreground_dice(y, x) == pytest.approx(8 / 9)


def test_loss_decreases_and_log_format(cases):
    model = build_model("liverformer", SMALL_MODEL, seed=0)
    res = train_loop(model, cases[:1], cases[1:2], TrainConfig(epochs=8, lr0=3e-3))
    losses = [r["train_loss"] for r in res.rows]
    assert losses[-1] < losses[0]
    text = format_log(res.rows)
    assert text.splitlines()[0] == "epoch,lr,train_loss,val_dice"
    assert len(text.splitlines()) == 9
    assert 0 <= res.best_epoch < 8


def test_runs_are_bit_identical(tmp_path, cases):
    logs = []
    for run in ("a", "b"):
        model = build_model("unet", SMALL_MODEL, seed=1)
        train_loop(model, cases[:2], cases[2:], TrainConfig(epochs=2, seed=3), run_dir=tmp_path / run)
        logs.append((tmp_path / run / "log.csv").read_bytes())
        assert (tmp_path / run / "best" / "manifest.json").exists()
    assert logs[0] == logs[1]
    assert (tmp_path / "a" / "last" / "params.bin").read_bytes() == (tmp_path / "b" / "last" / "params.bin").read_bytes()


def test_best_checkpoint_reproduces_val_dice(tmp_path, cases):
    model = build_model("liverformer", SMALL_MODEL, seed=2)
    res = train_loop(model, cases[:2], cases[2:], TrainConfig(epochs=3, lr0=3e-3), run_dir=tmp_path)
    back = SegmentationModel.load(tmp_path / "best")
    assert evaluate_dice(back, cases[2:]) == res.best_val_dice


def test_callback_stops_early(cases):
    model = build_model("unet", SMALL_MODEL, seed=0)
    res = train_loop(model, cases[:1], [], TrainConfig(epochs=10), callback=lambda row: row["epoch"] == 1)
    assert len(res.rows) == 2 and np.isnan(res.best_val_dice)
    with pytest.raises(TooFewCases):
        train_loop(model, [], [], TrainConfig(epochs=1))

import json
import math

import numpy as np
import pytest

from rnnpose import diffcore as dc
from rnnpose.assocrnn import AssociationRNN, RnnConfig
from rnnpose.oraclefeat import NoiseConfig
from rnnpose.scenedata import Joint, Person, Scene, SceneConfig, generate_synthetic_scene
from rnnpose.trainer import (
    Adam, AdamConfig, NumericError, TrainConfig, adam_step, clip_gradients, format_config, iter_metrics,
    load_config, parse_config, scene_features, train, train_step, training_scenes,
)

SCENE = SceneConfig(n_range=(1, 2), map_size=16, height_range=(0.5, 0.7), min_separation=1.0)
MODEL = RnnConfig(layers=2, hidden_channels=4, map_size=16, stacks=1, feature_channels=3)
SMALL = TrainConfig(lr_schedule=((0, 1e-3),), scene=SCENE, model=MODEL)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient():
    p = np.array([1.0, -2.0])
    m, v = np.array([0.3, -0.1]), np.array([0.2, 0.05])
    new, m2, v2 = adam_step(p, np.zeros(2), m, v, 3, 0.1)
    np.testing.assert_allclose(m2, 0.9 * m)
    np.testing.assert_allclose(v2, 0.999 * v)
    # decaying moments alone still move the parameter; with fresh moments nothing moves
    fresh, _, _ = adam_step(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1)
    np.testing.assert_array_equal(fresh, p)


def test_adam_two_steps_by_hand():
    lr, eps = 0.1, 1e-8
    # step 1, g = 0.5: m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
    p1 = 1.0 - lr * 0.5 / (0.5 + eps)
    # step 2, g = -1: m = 0.045 - 0.1, v = 0.00024975 + 0.001
    m2, v2 = -0.055, 0.00124975
    p2 = p1 - lr * (m2 / 0.19) / (math.sqrt(v2 / (1 - 0.999**2)) + eps)
    p, m, v = np.array(1.0), np.array(0.0), np.array(0.0)
    p, m, v = adam_step(p, np.array(0.5), m, v, 1, lr)
    assert float(p) == pytest.approx(p1, abs=1e-15)
    p, m, v = adam_step(p, np.array(-1.0), m, v, 2, lr)
    assert float(m) == pytest.approx(m2, abs=1e-15) and float(v) == pytest.approx(v2, abs=1e-15)
    assert float(p) == pytest.approx(p2, abs=1e-14)
    assert float(p) == pytest.approx(0.9366104, abs=1e-7)


def test_adam_constant_gradient_unit_step():
    p, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    g = np.array([2.0, -0.01, 50.0])
    for t in range(1, 2001):
        prev = p
        p, m, v = adam_step(p, g, m, v, t, 1e-3)
    np.testing.assert_allclose(prev - p, 1e-3 * np.sign(g), rtol=1e-4)


def test_adam_rejects_t0():
    with pytest.raises(ValueError):
        adam_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 0, 0.1)


def test_adam_optimizer_updates_trainable_only():
    a = dc.Parameter(np.ones(2), name="a")
    b = dc.Parameter(np.ones(2), name="b", trainable=False)
    opt = Adam([a, b])
    a.grad = np.array([1.0, -1.0])
    opt.step(0.1)
    np.testing.assert_allclose(a.data, [0.9, 1.1], atol=1e-7)
    np.testing.assert_array_equal(b.data, [1.0, 1.0])
    assert opt.state.t == 1


def test_clip_gradients():
    a = dc.Parameter(np.zeros(2), name="a")
    a.grad = np.array([3.0, 4.0])
    assert clip_gradients([a], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.8])
    a.grad = np.array([0.3, 0.4])
    clip_gradients([a], 1.0)
    np.testing.assert_array_equal(a.grad, [0.3, 0.4])


# ---------------------------------------------------------------- config


def test_defaults():
    c = TrainConfig()
    assert c.lr_schedule == ((0, 1e-4), (4, 1e-5))
    assert (c.epochs, c.unroll_cap, c.batch_size) == (5, 6, 1)
    assert c.adam == AdamConfig(0.9, 0.999, 1e-8)


def test_lr_schedule_boundaries():
    c = TrainConfig()
    assert [c.lr_at(e) for e in range(6)] == [1e-4] * 4 + [1e-5] * 2
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule=((0, 1e-4), (2, 1e-3)))
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule=((1, 1e-4),))
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule=((0, 0.0),))
    with pytest.raises(ValueError):
        TrainConfig(batch_size=2)


def test_config_round_trip():
    c = TrainConfig(seed=7, epochs=2, lr_schedule=((0, 3e-4), (1, 1e-5)), zero_confidence=True,
                    scene=SceneConfig(n_range=(2, 3), overlap_fraction=0.8),
                    noise=NoiseConfig(embed_noise=0.1), model=RnnConfig(feedback_iterations=0))
    assert parse_config(format_config(c)) == c


def test_config_parse_dotted_and_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# tiny run\nepochs = 2\nmodel.feedback_iterations = 0  # ablation\n"
                    "lr_schedule = 0:1e-3, 3:1e-4\nscene.n_range = 1, 2\nadam.beta1 = 0.8\n")
    c = load_config(path)
    assert c.epochs == 2 and c.model.feedback_iterations == 0
    assert c.lr_schedule == ((0, 1e-3), (3, 1e-4))
    assert c.scene.n_range == (1, 2) and c.adam.beta1 == 0.8
    assert c.model.hidden_channels == RnnConfig().hidden_channels


@pytest.mark.parametrize("text", ["bogus = 1", "epochs", "epochs = many", "zero_confidence = maybe"])
def test_config_errors(text):
    with pytest.raises(ValueError):
        parse_config(text)


# ---------------------------------------------------------------- train_step


def _setup(seed=0, config=SMALL):
    scene = generate_synthetic_scene(seed, config.scene)
    return scene, scene_features(scene, seed, config), AssociationRNN(config.model, seed=seed)


def test_train_step_n1_unroll_length():
    scene, feats, model = _setup()
    one = Scene(scene.persons[:1], scene.map_size, scene.joint_count)
    preds = model.unroll(feats, "train", n_true=1, cap=SMALL.unroll_cap, rng=np.random.default_rng(0))
    assert len(preds) == 2
    rec = train_step(model, one, feats, Adam(model.parameters()), 1e-3, SMALL, np.random.default_rng(0))
    assert set(rec) >= {"total", "joints", "stop"}
    assert rec["total"] == pytest.approx(rec["joints"] + rec["stop"])


def test_train_step_degenerate_scene_finite():
    joints = tuple(Joint(8.0, 8.0, j == 2) for j in range(5))
    scene = Scene((Person(joints),), 16, 5)
    feats = scene_features(scene, 0, SMALL)
    model = AssociationRNN(SMALL.model, seed=0)
    rec = train_step(model, scene, feats, Adam(model.parameters()), 1e-3, SMALL, np.random.default_rng(0))
    assert all(math.isfinite(rec[k]) for k in ("total", "joints", "stop"))


def test_train_step_rejects_empty_scene():
    _, feats, model = _setup()
    with pytest.raises(ValueError):
        train_step(model, Scene((), 16, 5), feats, Adam(model.parameters()), 1e-3, SMALL, np.random.default_rng(0))


def test_train_step_non_finite_raises_numeric_error():
    scene, feats, model = _setup()
    model["head.w"].data[:] = np.nan
    with pytest.raises(NumericError, match="tagged"):
        train_step(model, scene, feats, Adam(model.parameters()), 1e-3, SMALL, np.random.default_rng(0), tag="tagged")


@pytest.mark.slow
def test_single_scene_loss_decreases():
    """200 steps on one scene: loss[i + 50] < loss[i] for every i, on at least 90% of 20 seeds."""
    good = 0
    for seed in range(20):
        scene, feats, model = _setup(seed)
        opt = Adam(model.parameters())
        rng = np.random.default_rng(seed)
        losses = [train_step(model, scene, feats, opt, 1e-3, SMALL, rng)["total"] for _ in range(200)]
        good += all(losses[i + 50] < losses[i] for i in range(150))
    assert good >= 18


# ---------------------------------------------------------------- train loop

TINY_RUN = TrainConfig(lr_schedule=((0, 1e-3), (1, 1e-4)), epochs=2, train_scenes=6, val_scenes=3, seed=5,
                       scene=SCENE, model=MODEL)


def test_training_scenes_deterministic():
    a, va = training_scenes(TINY_RUN)
    b, vb = training_scenes(TINY_RUN)
    assert a == b and va == vb and len(a) == 6 and len(va) == 3
    assert a[0] not in va


def test_train_writes_metrics_and_checkpoints(tmp_path):
    res = train(TINY_RUN, tmp_path / "run")
    assert res.checkpoint.exists()
    assert (tmp_path / "run" / "epoch0.ckpt").exists() and (tmp_path / "run" / "epoch1.ckpt").exists()
    records = list(iter_metrics(res.metrics))
    steps = [r for r in records if "step" in r]
    assert len(steps) == 12
    assert all({"epoch", "step", "joints_loss", "stop_loss", "total", "lr"} <= set(r) for r in steps)
    assert [r["lr"] for r in steps] == [1e-3] * 6 + [1e-4] * 6
    epochs = [r for r in records if r.get("kind") == "epoch"]
    assert [e["epoch"] for e in epochs] == [0, 1] and all(0 <= e["val_count_accuracy"] <= 1 for e in epochs)
    assert all(isinstance(e["clipped_steps"], int) for e in epochs)
    json.loads(res.metrics.read_text().splitlines()[0])


def test_train_bit_reproducible(tmp_path):
    a = train(TINY_RUN, tmp_path / "a")
    b = train(TINY_RUN, tmp_path / "b")
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert a.metrics.read_text() == b.metrics.read_text()
    c = train(TrainConfig(**{**TINY_RUN.__dict__, "seed": 6}), tmp_path / "c")
    assert c.checkpoint.read_bytes() != a.checkpoint.read_bytes()


def test_train_bad_output_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        train(TINY_RUN, blocker / "sub")

import dataclasses

import numpy as np
import pytest

from sef import nn, train
from sef.data import Dataset, to_input
from sef.losses import classification_loss
from sef.tensor import Tensor, backward
from sef.train import CheckpointError, ConfigFileError, TrainConfig, TrainingError

from .conftest import tiny_model


def cfg(**kw):
    base = dict(epochs=2, batch_size=5, lr=0.05, lr_decay_every=1, classes=4, channels=8)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule():
    c = TrainConfig.full_scale()
    assert train.lr_at(0, c) == 0.01
    assert abs(train.lr_at(20, c) - 0.001) < 1e-15
    assert abs(train.lr_at(40, c) - 0.0001) < 1e-16
    assert train.lr_at(19, c) == 0.01
    flat = TrainConfig(lr=0.3, lr_decay_every=100, epochs=30)
    assert {train.lr_at(e, flat) for e in range(30)} == {0.3}


def test_desk_defaults():
    c = TrainConfig()
    assert (c.epochs, c.lr_decay_every, c.lr, c.batch_size, c.momentum) == (30, 12, 0.05, 64, 0.9)
    w = c.weights
    assert (w.lam, w.gamma, w.phi, w.groups) == (1.0, 0.05, 1.0, 2)


def test_sgd_plain_step():
    p, v = {"w": np.array([5.0])}, {"w": np.array([0.0])}
    train.sgd_step(p, {"w": np.array([2.0])}, v, lr=1.0, momentum=0.0)
    assert p["w"][0] == 3.0


def test_sgd_zero_gradient_is_noop():
    p, v = {"w": np.array([1.0, 2.0])}, {"w": np.zeros(2)}
    train.sgd_step(p, {"w": np.zeros(2)}, v, 0.1, 0.9)
    assert p["w"].tolist() == [1.0, 2.0]


def test_sgd_momentum_two_steps():
    p, v = {"w": np.array([0.0])}, {"w": np.array([0.0])}
    for _ in range(2):
        train.sgd_step(p, {"w": np.array([1.0])}, v, 0.1, 0.9)
    assert abs(p["w"][0] + 0.29) < 1e-15


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError, match="w"):
        train.sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {"w": np.zeros(2)}, 0.1, 0.9)


def test_zero_epochs_leaves_model_unchanged(tiny_sets):
    m = tiny_model()
    before = {k: p.data.copy() for k, p in m.parameters().items()}
    result = train.train(m, tiny_sets[0], tiny_sets[1], cfg(epochs=0))
    assert result.history == []
    assert all(np.array_equal(before[k], p.data) for k, p in m.parameters().items())


def run(tiny_sets, seed=0, **kw):
    m = tiny_model(seed=seed)
    return m, train.train(m, tiny_sets[0], tiny_sets[1], cfg(seed=seed, **kw))


def test_same_seed_identical_history(tiny_sets):
    (m1, r1), (m2, r2) = run(tiny_sets), run(tiny_sets)
    assert [dataclasses.asdict(h) for h in r1.history] == [dataclasses.asdict(h) for h in r2.history]
    for k, p in m1.parameters().items():
        assert p.data.tobytes() == m2.parameters()[k].data.tobytes()


def test_history_records_terms_and_group_accuracy(tiny_sets):
    _, r = run(tiny_sets)
    rec = r.history[-1]
    assert set(rec.losses) == {"cross_entropy", "entropy_global", "distill_mean", "grouping", "total"}
    assert len(rec.group_val_accuracy) == 2
    assert all(0 <= a <= 1 for a in rec.group_val_accuracy)
    assert [h.lr for h in r.history] == [0.05, 0.05 * 0.1]


def plain_trainer(model, ds, c):
    """Minimal cross-entropy trainer written independently of train.train."""
    params = model.parameters()
    vel = {k: np.zeros_like(p.data) for k, p in params.items()}
    rng = np.random.default_rng(c.seed)
    epoch_losses = []
    for epoch in range(c.epochs):
        lr = c.lr * c.lr_decay_factor ** (epoch // c.lr_decay_every)
        order = rng.permutation(len(ds))
        flips = rng.random(len(ds)) < 0.5
        losses = []
        for start in range(0, len(ds), c.batch_size):
            idx = order[start:start + c.batch_size]
            x = to_input(ds.images[idx])
            x = np.where(flips[idx][:, None, None, None], x[..., ::-1], x)
            pooled = nn.global_avg_pool(model.backbone(Tensor(x)))
            logits = pooled @ model.global_head.weight + model.global_head.bias
            loss = classification_loss(logits, ds.labels[idx])
            for p in params.values():
                p.grad = None
            backward(loss)
            for k, p in params.items():
                g = np.zeros_like(p.data) if p.grad is None else p.grad
                vel[k] = c.momentum * vel[k] + g
                p.data = p.data - lr * vel[k]
            losses.append(loss.item())
        epoch_losses.append(np.mean(losses))
    return epoch_losses


def test_zero_weights_match_plain_trainer(tiny_sets):
    c = cfg(lam=0.0, gamma=0.0, phi=0.0, epochs=3)
    m_ref = tiny_model()
    ref = plain_trainer(m_ref, tiny_sets[0], c)
    m = tiny_model()
    hist = train.train(m, tiny_sets[0], tiny_sets[1], c).history
    np.testing.assert_allclose([h.losses["total"] for h in hist], ref, rtol=1e-12, atol=0)
    np.testing.assert_allclose([h.losses["cross_entropy"] for h in hist], ref, rtol=1e-12, atol=0)
    for k, p in m.parameters().items():
        np.testing.assert_allclose(p.data, m_ref.parameters()[k].data, rtol=1e-9, atol=1e-12)


def test_loss_report_identity_each_epoch(tiny_sets):
    _, r = run(tiny_sets, lam=0.7, gamma=0.3, phi=0.5)
    w = TrainConfig(lam=0.7, gamma=0.3, phi=0.5).weights
    for h in r.history:
        recombined = (h.losses["cross_entropy"] - w.lam * h.losses["entropy_global"]
                      + w.gamma * h.losses["distill_mean"] + w.phi * h.losses["grouping"])
        assert abs(recombined - h.losses["total"]) < 1e-12


def test_non_finite_loss_aborts_with_location(tiny_sets):
    m = tiny_model()
    m.global_head.bias.data[0] = np.nan
    with pytest.raises(TrainingError, match="epoch 0, batch 0"):
        train.train(m, tiny_sets[0], tiny_sets[1], cfg())


def test_class_count_mismatch(tiny_sets):
    with pytest.raises(TrainingError, match="classes"):
        train.train(tiny_model(classes=5), tiny_sets[0], tiny_sets[1], cfg())


def test_evaluate_hand_fixture():
    m = tiny_model()
    m.global_head.weight.data[:] = 0
    m.global_head.bias.data[:] = [0.0, 3.0, 1.0, 2.0]
    ds = Dataset(np.zeros((4, 3, 8, 8), np.uint8), [1, 1, 1, 0], 4)
    assert train.evaluate(m, ds) == 0.75


def test_evaluate_constant_logits_gives_tie_class_frequency():
    m = tiny_model()
    m.global_head.weight.data[:] = 0
    m.global_head.bias.data[:] = 0
    labels = np.array([0, 2, 0, 3, 1, 0])
    ds = Dataset(np.zeros((6, 3, 8, 8), np.uint8), labels, 4)
    assert train.evaluate(m, ds) == 0.5


def test_evaluation_is_flip_free(tiny_sets):
    m = tiny_model()
    a = train.evaluate(m, tiny_sets[2])
    assert a == train.evaluate(m, tiny_sets[2])


# ---------------------------------------------------------------- checkpoints

def test_empty_checkpoint_is_twelve_bytes(tmp_path):
    path = tmp_path / "e.sefw"
    train.save_checkpoint(path, arrays={})
    assert path.read_bytes() == b"SEFW" + (1).to_bytes(4, "little") + bytes(4)
    assert train.load_checkpoint(path) == {}


def test_checkpoint_round_trip_is_bitwise(tmp_path, tiny_sets):
    m, r = run(tiny_sets, epochs=1)
    p1, p2 = tmp_path / "a.sefw", tmp_path / "b.sefw"
    train.save_checkpoint(p1, m, r.velocities, 1)
    arrays = train.load_checkpoint(p1)
    train.save_checkpoint(p2, arrays=arrays)
    assert p1.read_bytes() == p2.read_bytes()
    m2, vel, epoch = train.model_from_arrays(arrays)
    assert epoch == 1
    for k, p in m.parameters().items():
        assert p.data.tobytes() == m2.parameters()[k].data.tobytes()
        assert vel[k].tobytes() == r.velocities[k].tobytes()


def test_resume_matches_uninterrupted_run(tiny_sets):
    m_full, _ = run(tiny_sets, epochs=2)
    m, r = run(tiny_sets, epochs=1)
    arrays = train.model_state(m, r.velocities, 1)
    m2, vel, epoch = train.model_from_arrays(arrays)
    # resuming replays the shuffling stream from the start, so only the schedule continues
    r2 = train.train(m2, tiny_sets[0], tiny_sets[1], cfg(epochs=1), vel, start_epoch=epoch)
    assert r2.history[0].epoch == 1 and r2.history[0].lr == pytest.approx(0.005)


def test_per_epoch_checkpoints_written(tmp_path, tiny_sets):
    run(tiny_sets, checkpoint_dir=str(tmp_path))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_000.sefw", "epoch_001.sefw", "last.sefw"]


def test_truncated_checkpoint_reports_lengths(tmp_path):
    buf = train.checkpoint_bytes({"w": np.arange(3.0)})
    with pytest.raises(CheckpointError, match=f"expected at least {len(buf)} bytes, file has {len(buf) - 1}"):
        train.parse_checkpoint(buf[:-1])


def test_checkpoint_bad_magic_and_version():
    buf = train.checkpoint_bytes({})
    with pytest.raises(CheckpointError, match="bad magic at offset 0"):
        train.parse_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError, match="unsupported version 2 at offset 4"):
        train.parse_checkpoint(buf[:4] + (2).to_bytes(4, "little") + buf[8:])


def test_checkpoint_trailing_bytes():
    with pytest.raises(CheckpointError, match="trailing"):
        train.parse_checkpoint(train.checkpoint_bytes({}) + b"x")


# ---------------------------------------------------------------- config files

def test_parse_config_keys_and_overrides():
    text = "# desk run\nseed = 3\nlambda=0.5  # max entropy\ngamma=0.1\nflip=false\ntrain_path=/x.sefd\n"
    c = train.parse_config(text, seed=9)
    assert (c.seed, c.lam, c.gamma, c.flip, c.train_path) == (9, 0.5, 0.1, False, "/x.sefd")


@pytest.mark.parametrize("text,match", [
    ("bogus=1", "unknown key 'bogus'"),
    ("lam=1", "unknown key 'lam'"),
    ("epochs", "expected key=value"),
    ("epochs=ten", "bad value for epochs"),
    ("momentum=1.0", "momentum"),
    ("lr_decay_factor=0", "lr_decay_factor"),
])
def test_parse_config_errors(text, match):
    with pytest.raises(ConfigFileError, match=match):
        train.parse_config(text)


def test_load_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("epochs=4\nbatch_size=16\n")
    c = train.load_config(p)
    assert (c.epochs, c.batch_size) == (4, 16)

import csv
from types import SimpleNamespace

import numpy as np
import pytest

from voxelrec.model import Model, NetworkConfig
from voxelrec.tensor import Tensor, backward
from voxelrec.train import AdamState, TrainConfig, adam_step, image_loss, mse_loss, schedule, train, volume_loss

SMALL = dict(encoder_channels=(4, 4, 8), volume_channels=(8, 4, 4, 2), image_channels=(8, 4, 4, 2, 2), stn_channels=4)


def toy_data(n=24, seed=0):
    rng = np.random.default_rng(seed)
    return SimpleNamespace(images=rng.random((n, 3, 32, 32), dtype=np.float32),
                           volumes=(rng.random((n, 32, 32, 32)) > 0.7).astype(np.uint8))


def test_mse_loss_value_and_shape_check():
    assert mse_loss(Tensor(np.array([1.0, 3.0])), np.array([0.0, 1.0])).item() == pytest.approx(2.5)
    with pytest.raises(ValueError):
        mse_loss(Tensor(np.zeros(3)), np.zeros(4))


def test_adam_matches_hand_formula():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState()
    cfg = TrainConfig()
    m = v = np.zeros(2)
    ref = p.data.copy()
    for t in range(1, 4):
        g = np.array([0.5, -1.5]) * t
        p.grad = g.copy()
        adam_step({"p": p}, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.001 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.allclose(p.data, ref, rtol=0, atol=1e-12)


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([123.0])
    adam_step({"p": p}, AdamState(), TrainConfig(lr=0.01))
    assert p.data[0] == pytest.approx(-0.01)


def test_adam_requires_gradients():
    with pytest.raises(ValueError):
        adam_step({"p": Tensor(np.zeros(1), requires_grad=True)}, AdamState(), TrainConfig())


def test_schedule_switches_every_three():
    assert schedule(8, "twin", 3) == ["volume"] * 3 + ["image"] * 3 + ["volume"] * 2
    assert set(schedule(5, "volume_only")) == {"volume"}


def test_train_config_validation():
    for bad in (dict(lr=0), dict(batch_size=1), dict(mode="both"), dict(epochs=0), dict(switch_period=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_image_loss_suppresses_shape_slots():
    cfg = NetworkConfig.faces(**SMALL)
    m = Model(cfg)
    loss, code = image_loss(m, toy_data(4).images, suppress=True)
    backward(loss)
    # the encoder sees gradient only through the transformation slots
    assert np.abs(m.fc_code.weight.grad[:, :cfg.shape_len]).max() == 0
    assert np.abs(m.fc_code.weight.grad[:, cfg.shape_len:]).max() > 0


def test_volume_loss_reaches_encoder_only_through_shape_slots():
    cfg = NetworkConfig.faces(**SMALL)
    m = Model(cfg)
    d = toy_data(4)
    loss, _ = volume_loss(m, d.images, d.volumes)
    backward(loss)
    assert np.abs(m.fc_code.weight.grad[:, cfg.shape_len:]).max() == 0
    assert np.abs(m.fc_code.weight.grad[:, :cfg.shape_len]).max() > 0


def test_volume_mode_leaves_image_decoder_untouched(tmp_path):
    m = Model(NetworkConfig.faces(**SMALL))
    before = {k: v.data.copy() for k, v in m.parameters().items()}
    train(m, toy_data(), TrainConfig(batch_size=4, mode="volume_only"))
    after = {k: v.data for k, v in m.parameters().items()}
    assert all(np.array_equal(before[k], after[k]) for k in before if k.startswith("image_decoder."))
    assert any(not np.array_equal(before[k], after[k]) for k in before if k.startswith("volume_decoder."))


def test_twin_mode_log_and_partial_batch(tmp_path):
    m = Model(NetworkConfig.faces(**SMALL))
    _, log = train(m, toy_data(27), TrainConfig(batch_size=4, mode="twin"), log_path=tmp_path / "m.csv")
    assert len(log) == 6
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["step", "mode", "loss"]
    assert [r[1] for r in rows[1:]] == ["volume"] * 3 + ["image"] * 3
    assert all(np.isfinite(float(r[2])) for r in rows[1:])
    assert not m.training


def test_training_reduces_volume_loss():
    m = Model(NetworkConfig.faces(seed=1, **SMALL))
    d = toy_data(8)
    d.images = np.repeat(d.images[:2], 4, axis=0)
    d.volumes = np.repeat(d.volumes[:2], 4, axis=0)
    _, log = train(m, d, TrainConfig(batch_size=4, epochs=15, lr=0.003))
    losses = log.losses()
    assert losses[-4:].mean() < losses[:4].mean()


def test_train_is_bitwise_reproducible():
    states = []
    for _ in range(2):
        m = Model(NetworkConfig.faces(seed=2, **SMALL))
        train(m, toy_data(), TrainConfig(batch_size=4, mode="twin", seed=9))
        states.append(m.state())
    assert all(np.array_equal(states[0][k], states[1][k]) for k in states[0])


def test_train_rejects_tiny_dataset():
    with pytest.raises(ValueError):
        train(Model(NetworkConfig.faces(**SMALL)), toy_data(3), TrainConfig(batch_size=4))

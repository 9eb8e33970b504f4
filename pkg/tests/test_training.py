import numpy as np
import pytest

from mavlkit import numerics as nx
from mavlkit.data_io import SyntheticSpec, gen_synthetic_dataset
from mavlkit.eval_protocol import EvalConfig
from mavlkit.model import ModelConfig, checkpoint_bytes, tokenize
from mavlkit.numerics import Tensor
from mavlkit.training import (Adam, TrainConfig, evaluate_query, setting_samples, train,
                              xyxy_to_unit_cxcywh)

SMALL_MODEL = ModelConfig(image_size=32, strides=(8, 16), d=16, enc_layers=1, dec_layers=1, queries=8,
                          fusion_blocks=2, msda_heads=2, msda_points=2, attn_heads=2,
                          ffn_hidden=16)


@pytest.fixture(scope="module")
def data():
    return gen_synthetic_dataset(SyntheticSpec(n_images=12, image_size=32, small_side=(3, 6),
                                               medium_side=(8, 13), large_side=(15, 20), seed=0))


def test_lr_schedule():
    cfg = TrainConfig(steps=100, lr=1e-3, warmup=10, decay_at=0.5)
    assert cfg.lr_at(0) == pytest.approx(1e-4)
    assert cfg.lr_at(20) == 1e-3
    assert cfg.lr_at(50) == pytest.approx(1e-4)


def test_adam_minimizes_quadratic_and_clips():
    w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam({"w": w})
    for _ in range(500):
        w.grad = None
        with nx.GradTape() as tape:
            loss = nx.tsum(w * w)
        tape.backward(loss)
        norm = opt.step(0.05, clip=1.0)
    assert np.all(np.abs(w.data) < 1e-2)
    assert norm < 0.1
    w.grad = np.array([np.nan, 0.0])
    with pytest.raises(nx.NonFiniteError):
        opt.step(0.1)


def test_box_conversion():
    np.testing.assert_allclose(xyxy_to_unit_cxcywh([[0, 0, 32, 16]], 32, 32), [[0.5, 0.25, 1.0, 0.5]])


def test_setting_samples(data):
    s5 = setting_samples(data, 5)
    assert len(s5) == len(data.groups)
    assert {s.tokens for s in s5} <= {tuple(tokenize(q)) for q in ("ALL", "SMALL", "LARGE")}
    s1 = setting_samples(data, 1)
    assert len(s1) == 12 and all(s.tokens == tuple(tokenize("ALL")) for s in s1)
    assert sum(len(s.targets) for s in s1) == sum(len(g.boxes) for g in data.groups)
    s2 = setting_samples(data, 2)
    assert sum(len(s.targets) for s in s2) == len(data.dataset.annotations)
    s3 = setting_samples(data, 3)
    assert all(len(s.targets) <= 6 for s in s3)
    with pytest.raises(ValueError):
        setting_samples(data, 9)


def test_short_training_is_deterministic_and_reduces_loss(data):
    cfg = TrainConfig(steps=30, batch_size=4, lr=2e-3, warmup=5, log_every=10)
    samples = setting_samples(data, 5)
    a = train(SMALL_MODEL, cfg, data.images, samples)
    b = train(SMALL_MODEL, cfg, data.images, samples)
    assert checkpoint_bytes(SMALL_MODEL, a.params) == checkpoint_bytes(SMALL_MODEL, b.params)
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    assert a.history[-1]["loss"] < a.history[0]["loss"]
    rep = evaluate_query(a.params, SMALL_MODEL, data, "ALL", EvalConfig())
    assert 0.0 <= rep["ap50"] <= 1.0
    with pytest.raises(ValueError):
        train(SMALL_MODEL, cfg, data.images, [])

import json

import numpy as np
import pytest

from a2d import numerics as nx
from a2d.data import Vocab, synth_task
from a2d.distill import DistillConfig
from a2d.errors import ConfigError
from a2d.numerics import Tensor
from a2d.train import (LOG_KEYS, Adam, AdamState, NonFiniteGradientError, TrainConfig, adam_step,
                       clip_grad_norm, distill_run, lambda_schedule, train_teacher, warmup_lr)
from a2d.transformer import ModelConfig, Transformer

TINY = ModelConfig(n_enc_layers=1, n_dec_layers=1, n_heads=2, d_model=8, d_ffn=16,
                   vocab_size=9, max_len=8, dropout_rate=0.1)
TINY_TEACHER = ModelConfig(n_enc_layers=1, n_dec_layers=1, n_heads=4, d_model=16, d_ffn=16,
                           vocab_size=9, max_len=8, dropout_rate=0.0)


def test_lambda_schedule_values():
    assert lambda_schedule(1.0, 0) == 1.0
    assert lambda_schedule(1.0, 2) == pytest.approx(0.81, abs=1e-12)
    assert lambda_schedule(1.0, 22) == pytest.approx(0.9 ** 22)
    assert round(lambda_schedule(1.0, 22), 2) == 0.1
    values = [lambda_schedule(1.0, e) for e in range(30)]
    assert all(a > b > 0 for a, b in zip(values, values[1:]))


def test_warmup_peaks_at_base_lr():
    lrs = [warmup_lr(1e-3, s, 10) for s in range(1, 40)]
    assert max(lrs) == pytest.approx(1e-3)
    assert int(np.argmax(lrs)) + 1 == 10
    assert lrs[0] == pytest.approx(1e-4)


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.arange(4.0), requires_grad=True)
    p.grad = np.zeros(4)
    adam_step([("p", p)], AdamState(), 0.1)
    np.testing.assert_array_equal(p.data, np.arange(4.0))


def test_adam_first_step_hand_computed():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -3.0])
    adam_step([("p", p)], AdamState(), 0.01, eps=1e-9)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0]) - 0.01 * p.grad / (np.abs(p.grad) + 1e-9)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)


def test_adam_is_deterministic():
    def run():
        g = np.random.default_rng(3)
        p = Tensor(g.standard_normal(5), requires_grad=True)
        state = AdamState()
        for _ in range(10):
            p.grad = g.standard_normal(5)
            adam_step([("p", p)], state, 1e-2)
        return p.data.tobytes()
    assert run() == run()


def test_adam_rejects_nan_naming_parameter():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.array([0.0, np.nan, 1.0])
    with pytest.raises(NonFiniteGradientError, match="enc.0.self.q.w"):
        adam_step([("enc.0.self.q.w", p)], AdamState(), 0.1)
    np.testing.assert_array_equal(p.data, np.zeros(3))


def test_adam_wrapper_uses_schedule():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([("p", p)], TrainConfig(learning_rate=1.0, warmup_steps=4))
    p.grad = np.ones(2)
    assert opt.step() == pytest.approx(0.25)
    opt.zero_grad()
    assert p.grad is None


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    norm = np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
    assert norm == pytest.approx(1.0)
    a.grad = np.array([0.3, 0.0])
    b.grad = np.array([0.4])
    clip_grad_norm([a, b], 1.0)
    np.testing.assert_array_equal(a.grad, [0.3, 0.0])


def test_train_config_validation():
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig(precision="float16")


@pytest.fixture(scope="module")
def tiny_data():
    train = synth_task("copy", 48, 2, 5, 9, seed=0)
    valid = synth_task("copy", 16, 2, 5, 9, seed=1, split="valid")
    return train, valid, Vocab.for_synth(9)


@pytest.fixture(scope="module")
def tiny_teacher(tiny_data):
    train, valid, vocab = tiny_data
    cfg = TrainConfig(epochs=2, batch_size=16, seed=3, precision="float64")
    return train_teacher(TINY_TEACHER, cfg, train, valid, vocab).model


def test_zero_weights_distill_equals_plain_training(tiny_data, tiny_teacher):
    train, valid, vocab = tiny_data
    cfg = TrainConfig(epochs=2, batch_size=16, seed=11, precision="float64")
    plain = train_teacher(TINY, cfg, train, valid, vocab)
    kd = distill_run(tiny_teacher, TINY, DistillConfig(lambda_att=0, mu_kd=0), cfg, train, valid, vocab)
    for (n, a), (_, b) in zip(plain.model.named_parameters(), kd.model.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n
    assert [h["l_ce"] for h in plain.history] == [h["l_ce"] for h in kd.history]


def test_distill_logs_and_isolation(tiny_data, tiny_teacher, tmp_path):
    train, valid, vocab = tiny_data
    cfg = TrainConfig(epochs=3, batch_size=16, seed=5, precision="float64")
    before = nx.parameters_checksum(tiny_teacher.parameters())
    a = distill_run(tiny_teacher, TINY, DistillConfig(), cfg, train, valid, vocab, tmp_path / "a")
    b = distill_run(tiny_teacher, TINY, DistillConfig(), cfg, train, valid, vocab, tmp_path / "b")
    assert nx.parameters_checksum(tiny_teacher.parameters()) == before
    assert all(p.grad is None for p in tiny_teacher.parameters())
    lines_a = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    assert lines_a == (tmp_path / "b" / "metrics.jsonl").read_text().splitlines()
    records = [json.loads(x) for x in lines_a]
    assert [r["epoch"] for r in records] == [0, 1, 2]
    for r in records:
        assert set(LOG_KEYS) <= set(r)
        assert np.isfinite(r["l_att"]) and np.isfinite(r["l_kd"])
    assert [r["lambda"] for r in records] == pytest.approx([1.0, 0.9, 0.81])
    assert (tmp_path / "a" / "checkpoint.a2d").exists()
    assert a.best == b.best


def test_distill_changes_aam_weights(tiny_data, tiny_teacher):
    train, valid, vocab = tiny_data
    cfg = TrainConfig(epochs=1, batch_size=16, seed=5, precision="float64")
    res = distill_run(tiny_teacher, TINY, DistillConfig(), cfg, train, valid, vocab)
    w = res.aams["enc_self"].w.data
    assert not np.allclose(w, 1.0 / w.shape[1])


def test_distill_vocab_size_mismatch(tiny_data, tiny_teacher):
    train, valid, vocab = tiny_data
    bad = ModelConfig(**{**TINY.to_dict(), "vocab_size": 10})
    with pytest.raises(ConfigError):
        distill_run(tiny_teacher, bad, DistillConfig(), TrainConfig(epochs=1), train, valid, vocab)


def test_train_teacher_learns_copy():
    train = synth_task("copy", 600, 2, 5, 9, seed=0)
    valid = synth_task("copy", 100, 2, 5, 9, seed=1, split="valid")
    cfg = TrainConfig(epochs=10, batch_size=32, learning_rate=3e-3, seed=0, val_bleu=False)
    model_cfg = ModelConfig(1, 1, 2, 16, 32, 9, 8, 0.0)
    res = train_teacher(model_cfg, cfg, train, valid, Vocab.for_synth(9))
    assert res.history[-1]["l_ce"] < res.history[0]["l_ce"]
    # chance level is about 1/6 over five content tokens and EOS
    assert res.best["val_acc"] > 0.4
    assert isinstance(res.model, Transformer)

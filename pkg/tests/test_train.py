import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from oracles import adamw_scalar, huber_scalar
from wavemoe import train as train_mod
from wavemoe.checkpoint import load_checkpoint, save_checkpoint
from wavemoe.data import Corpus, build_windows, synthetic_sinusoids
from wavemoe.exceptions import ConfigError, ContractError, EmptyCorpusError, NumericError
from wavemoe.losses import huber, joint_loss
from wavemoe.model import TINY_CONFIG, ModelConfig, init_model
from wavemoe.train import (
    TrainConfig,
    TrainState,
    adamw_step,
    assemble_batch,
    clip_grad_norm,
    lr_at,
    train_loop,
)


def T(x):
    return torch.tensor(x, dtype=torch.float64)


# -- huber / joint loss -------------------------------------------------------

def test_huber_examples():
    assert huber(T([0.0, 0.0]), T([0.0, 0.0])).item() == 0.0
    assert huber(T([0.5]), T([0.0]), 1.0).item() == 0.125
    assert huber(T([2.0]), T([0.0]), 1.0).item() == 1.5


def test_huber_matches_scalar_oracle(rng):
    p, t = rng.normal(size=50) * 2, rng.normal(size=50)
    m = rng.random(50) > 0.4
    expected = np.mean([huber_scalar(a - b, 0.7) for a, b, k in zip(p, t, m) if k])
    assert abs(huber(T(p), T(t), 0.7, torch.tensor(m)).item() - expected) < 1e-14


def test_huber_errors_and_empty_mask():
    with pytest.raises(ContractError):
        huber(T([1.0, 2.0]), T([1.0]))
    with pytest.raises(ContractError):
        huber(T([1.0]), T([1.0]), delta=0.0)
    assert huber(T([5.0]), T([0.0]), mask=torch.tensor([False])).item() == 0.0


def test_huber_masked_nan_does_not_leak():
    out = huber(T([1.0, float("nan")]), T([0.0, 0.0]), mask=torch.tensor([True, False]))
    assert out.item() == 0.5


def _trace(tp, wp, bal):
    return SimpleNamespace(time_predictions=T(tp), wavelet_predictions=T(wp), balance_loss=T(bal))


def _targets(tt, wt):
    return SimpleNamespace(time_targets=T(tt), wavelet_targets=T(wt),
                           time_mask=torch.ones(np.shape(tt), dtype=torch.bool),
                           wavelet_mask=torch.ones(np.shape(wt), dtype=torch.bool))


def test_joint_loss_hand_case():
    tr = _trace([[0.5, 2.0], [0.0, 0.0]], [[1.0, 0.0], [0.0, -3.0]], 2.0)
    cfg = SimpleNamespace(wavelet_loss_weight=1.0, load_balance_coeff=0.01)
    total, parts = joint_loss(tr, _targets(np.zeros((2, 2)), np.zeros((2, 2))), cfg)
    # time: (0.125 + 1.5) / 4; wavelet: (0.5 + 2.5) / 4; balance: 0.01 * 2
    assert parts["time"] == 0.40625 and parts["wavelet"] == 0.75
    assert abs(total.item() - 1.17625) < 1e-15


def test_joint_loss_time_only():
    tr = _trace([[0.5, 2.0]], [[9.0, 9.0]], 3.0)
    cfg = SimpleNamespace(wavelet_loss_weight=0.0, load_balance_coeff=0.0)
    total, parts = joint_loss(tr, _targets(np.zeros((1, 2)), np.zeros((1, 2))), cfg)
    assert total.item() == parts["time"] == 0.8125


def test_joint_loss_perfect_predictions():
    tr = _trace([[1.0, 2.0]], [[3.0, 4.0]], 2.5)
    cfg = SimpleNamespace(wavelet_loss_weight=1.0, load_balance_coeff=0.01)
    total, _ = joint_loss(tr, _targets([[1.0, 2.0]], [[3.0, 4.0]]), cfg)
    assert total.item() == 0.01 * 2.5


def test_joint_loss_non_finite():
    tr = _trace([[float("inf")]], [[0.0]], 1.0)
    cfg = SimpleNamespace(wavelet_loss_weight=1.0, load_balance_coeff=0.01)
    with pytest.raises(NumericError):
        joint_loss(tr, _targets([[0.0]], [[0.0]]), cfg)


def test_masked_raw_values_never_change_loss(rng):
    model = init_model(ModelConfig(**TINY_CONFIG), dtype=torch.float64)
    x = rng.normal(size=(2, 128))
    m = rng.random((2, 128)) > 0.2
    y = np.where(m, x, rng.normal(size=x.shape) * 1e3)
    losses = []
    for values in (x, y):
        b = assemble_batch(values, m, 8, dtype=torch.float64)
        tr = model(b.time_patches, b.wavelet_patches)
        losses.append(joint_loss(tr, b, model.config)[0].item())
    assert losses[0] == losses[1]


# -- schedule -----------------------------------------------------------------

def test_lr_schedule_examples():
    c = TrainConfig()
    assert lr_at(0, c) == 0.0
    assert lr_at(10_000, c) == 2e-4
    assert abs(lr_at(100_000, c) - 2e-6) < 1e-18
    with pytest.raises(ContractError):
        lr_at(100_001, c)
    with pytest.raises(ContractError):
        lr_at(-1, c)


def test_lr_schedule_shape():
    c = TrainConfig(total_steps=1000)
    lrs = np.array([lr_at(s, c) for s in range(1001)])
    assert lrs.argmax() == c.warmup_steps == 100
    assert np.all(np.diff(lrs[100:]) <= 0)
    assert np.all(np.diff(lrs[:101]) > 0)
    assert np.abs(np.diff(lrs)).max() < 2.1e-6  # no jumps


@pytest.mark.parametrize("bad", [dict(warmup_ratio=1.5), dict(base_lr=0.0), dict(batch_size=0),
                                 dict(beta2=1.0), dict(weight_decay=-1.0)])
def test_train_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


# -- optimizer ----------------------------------------------------------------

class Scalar(torch.nn.Module):
    def __init__(self, w=0.5):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([w], dtype=torch.float64))


def _state(w=0.5):
    m = Scalar(w)
    return TrainState.fresh(m)


def test_adamw_zero_grads_no_decay():
    st = _state()
    cfg = TrainConfig(total_steps=10, warmup_ratio=0.0, weight_decay=0.0)
    adamw_step(st, {"w": torch.zeros(1, dtype=torch.float64)}, cfg)
    assert st.model.w.item() == 0.5 and st.step == 1


def test_adamw_first_step_is_sign_step():
    st = _state(0.5)
    cfg = TrainConfig(base_lr=1e-3, total_steps=10, warmup_ratio=0.0, beta2=0.999, weight_decay=0.0,
                      grad_clip_norm=0.0)
    adamw_step(st, {"w": torch.ones(1, dtype=torch.float64)}, cfg)
    lr = lr_at(1, cfg)
    expected, _, _ = adamw_scalar(0.5, 1.0, 0.0, 0.0, 1, lr, 0.9, 0.999, 1e-8, 0.0)
    assert abs(st.model.w.item() - expected) < 1e-12
    assert abs(st.model.w.item() - (0.5 - lr)) < 1e-10


def test_adamw_matches_scalar_oracle_over_steps():
    st = _state(1.0)
    cfg = TrainConfig(base_lr=1e-2, total_steps=20, warmup_ratio=0.2, weight_decay=0.1, grad_clip_norm=0.0)
    w, m, v = 1.0, 0.0, 0.0
    for t in range(1, 21):
        g = math.sin(t)
        adamw_step(st, {"w": torch.tensor([g], dtype=torch.float64)}, cfg)
        w, m, v = adamw_scalar(w, g, m, v, t, lr_at(t, cfg), 0.9, 0.95, 1e-8, 0.1)
        assert abs(st.model.w.item() - w) < 1e-12


def test_weight_decay_shrinks_weights():
    st = _state(2.0)
    cfg = TrainConfig(base_lr=0.1, total_steps=10, warmup_ratio=0.0, weight_decay=0.1)
    w = 2.0
    for t in range(1, 4):
        adamw_step(st, {"w": torch.zeros(1, dtype=torch.float64)}, cfg)
        w *= 1 - lr_at(t, cfg) * 0.1
        assert abs(st.model.w.item() - w) < 1e-14


def test_adamw_decreases_quadratic():
    st = _state(1.0)
    cfg = TrainConfig(base_lr=1e-2, total_steps=10, warmup_ratio=0.0, weight_decay=0.0)
    before = (st.model.w.item() - 3) ** 2
    adamw_step(st, {"w": 2 * (st.model.w.detach() - 3)}, cfg)
    assert (st.model.w.item() - 3) ** 2 < before


def test_clip_grad_norm():
    g = {"a": torch.tensor([3.0, 0.0]), "b": torch.tensor([4.0])}
    assert clip_grad_norm(g, 1.0) == 5.0
    assert abs(math.sqrt(sum(float((x**2).sum()) for x in g.values())) - 1.0) < 1e-6
    with pytest.raises(NumericError):
        clip_grad_norm({"a": torch.tensor([float("inf")])}, 1.0)


# -- loop ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_corpus():
    rng = np.random.default_rng(0)
    windows, _ = build_windows(synthetic_sinusoids(12, 512, rng), 256)
    return Corpus.from_windows(windows)


def _cfgs(steps=6, **kw):
    mc = ModelConfig(**TINY_CONFIG)
    tc = TrainConfig(base_lr=1e-3, batch_size=4, total_steps=steps, warmup_ratio=0.2, seq_len=128,
                     log_interval=2, checkpoint_interval=3, **kw)
    return mc, tc


def test_train_loop_outputs(tmp_path, small_corpus):
    mc, tc = _cfgs()
    st = train_loop(small_corpus, mc, tc, out_dir=tmp_path)
    assert st.step == 6 and len(st.history) == 6
    recs = [json.loads(line) for line in (tmp_path / "loss_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [2, 4, 6]
    assert set(recs[0]) == {"step", "lr", "total", "time_loss", "wavelet_loss", "balance_loss", "wall_ms"}
    assert sorted(p.name for p in tmp_path.glob("checkpoint_*.bin")) == ["checkpoint_00000003.bin",
                                                                          "checkpoint_00000006.bin"]
    assert (tmp_path / "model.ckpt").exists()
    assert set(st.running) == {"total", "time", "wavelet", "balance"}


def test_train_loop_deterministic(small_corpus):
    mc, tc = _cfgs()
    a = train_loop(small_corpus, mc, tc)
    b = train_loop(small_corpus, mc, tc)
    assert a.history == b.history
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q), n


def test_resume_is_bitwise(tmp_path, small_corpus):
    mc, tc = _cfgs()
    full = train_loop(small_corpus, mc, tc)
    again = train_loop(small_corpus, mc, tc, out_dir=tmp_path)
    resumed = load_checkpoint(tmp_path / "checkpoint_00000003.bin", expected_config=mc)
    assert resumed.step == 3
    resumed = train_loop(small_corpus, mc, tc, state=resumed)
    assert resumed.history == full.history[3:]
    for (n, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert torch.equal(p, q), n
    assert again.history == full.history


def test_zero_steps_writes_initial_weights(tmp_path, small_corpus):
    mc, tc = _cfgs(steps=0)
    train_loop(small_corpus, mc, tc, out_dir=tmp_path)
    st = load_checkpoint(tmp_path / "model.ckpt")
    ref = init_model(mc)
    assert st.step == 0
    for (n, p), (_, q) in zip(ref.named_parameters(), st.model.named_parameters()):
        assert torch.equal(p, q), n


def test_empty_corpus():
    mc, tc = _cfgs()
    with pytest.raises(EmptyCorpusError):
        train_loop(None, mc, tc)
    with pytest.raises(EmptyCorpusError):
        Corpus.from_windows([])


def test_divergence_saves_last_good(tmp_path, small_corpus, monkeypatch):
    mc, tc = _cfgs()
    real = train_mod.loss_and_gradients
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 5:
            raise NumericError("synthetic divergence")
        return real(*args, **kwargs)

    monkeypatch.setattr(train_mod, "loss_and_gradients", flaky)
    with pytest.raises(NumericError):
        train_loop(small_corpus, mc, tc, out_dir=tmp_path)
    assert load_checkpoint(tmp_path / "last_good.ckpt").step == 4


def test_seq_len_alignment_enforced(small_corpus):
    mc, tc = _cfgs()
    from wavemoe.exceptions import AlignmentError

    with pytest.raises(AlignmentError):
        train_loop(small_corpus, mc, TrainConfig(**{**tc.to_dict(), "seq_len": 120}))


def test_save_checkpoint_roundtrip_in_loop(tmp_path, small_corpus):
    mc, tc = _cfgs(steps=2)
    st = train_loop(small_corpus, mc, tc)
    save_checkpoint(st, tmp_path / "x.ckpt", tc)
    back = load_checkpoint(tmp_path / "x.ckpt")
    assert back.train_config == tc
    assert back.rng.bit_generator.state == st.rng.bit_generator.state

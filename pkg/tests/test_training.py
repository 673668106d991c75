import numpy as np
import pytest
import torch

from protodiff import training
from protodiff.checkpoint import Checkpoint
from protodiff.data import ShapesSpec, gen_shapes
from protodiff.rng import stream
from protodiff.training import (Ema, TrainConfig, ddpm_loss, distinct_loss,
                                ema_from_checkpoint, finetune_distinct,
                                from_checkpoint, stage1_tensors, to_checkpoint,
                                train_joint, train_latent)

from conftest import make_tiny_model


class _OracleModel:
    """Wraps a real model but predicts the exact noise implied by the batch."""

    def __init__(self, model, x0):
        self._model = model
        self._x0 = x0
        self.sched = model.sched

    def activation(self, x0):
        return self._model.activation(x0)

    def predict_noise(self, xt, t, s):
        abar = torch.as_tensor(self.sched.alpha_bar(t), dtype=xt.dtype)
        shape = (-1,) + (1,) * (xt.ndim - 1)
        a = abar.reshape(shape) if abar.ndim else abar
        return (xt - torch.sqrt(a) * self._x0) / torch.sqrt(1 - a)


class _ZeroModel(_OracleModel):
    def predict_noise(self, xt, t, s):
        return torch.zeros_like(xt)


def _batch(n=16, size=16, seed=0):
    return torch.as_tensor(stream(seed, "batch").uniform(-1, 1, (n, 3, size, size)),
                           dtype=torch.float32)


def test_ddpm_loss_zero_for_oracle_denoiser(tiny_model):
    x0 = _batch()
    oracle = _OracleModel(tiny_model, x0)
    loss = ddpm_loss(x0, stream(1, "t"), oracle)
    assert loss.item() < 1e-8


def test_ddpm_loss_unit_scale_for_zero_denoiser(tiny_model):
    x0 = _batch(n=16)
    zero = _ZeroModel(tiny_model, x0)
    losses = [float(ddpm_loss(x0, stream(k, "t"), zero)) for k in range(8)]
    n_elems = 16 * 3 * 16 * 16
    se = np.sqrt(2.0 / (n_elems * len(losses)))
    assert abs(np.mean(losses) - 1.0) < 3 * se


def test_ddpm_loss_rejects_empty_batch(tiny_model):
    with pytest.raises(ValueError):
        ddpm_loss(torch.zeros(0, 3, 16, 16), stream(0, "t"), tiny_model)


def test_ddpm_loss_gradient_matches_finite_differences():
    model = make_tiny_model(dtype=torch.float64, zero_init=False)
    x0 = _batch(n=4).double()

    def loss_fn():
        return ddpm_loss(x0, stream(42, "fd"), model)

    loss = loss_fn()
    loss.backward()
    analytic = model.bank.grad[1, 2].item()
    h = 1e-6
    with torch.no_grad():
        model.bank[1, 2] += h
        up = loss_fn().item()
        model.bank[1, 2] -= 2 * h
        down = loss_fn().item()
        model.bank[1, 2] += h
    numeric = (up - down) / (2 * h)
    assert abs(analytic - numeric) / max(abs(analytic), abs(numeric)) < 1e-4


def test_joint_gradients_reach_encoder(tiny_model):
    model = make_tiny_model(zero_init=False)
    loss = ddpm_loss(_batch(n=4), stream(3, "t"), model)
    loss.backward()
    assert model.encoder.convs[0].weight.grad.abs().sum() > 0
    assert model.bank.grad.abs().sum() > 0


def test_distinct_loss_orthogonal_bank_is_zero():
    assert distinct_loss(torch.eye(5), 1.0).item() == 0.0


def test_distinct_loss_duplicated_pair():
    bank = torch.cat([torch.eye(4), torch.eye(4)[:1]], dim=0)  # 5 prototypes
    val = distinct_loss(bank, 0.5).item()
    assert val == pytest.approx(2 * 0.5 / 5)


def test_distinct_loss_brute_force_oracle():
    gen = stream(4, "bank")
    for _ in range(30):
        m = int(gen.integers(2, 8))
        d = int(gen.integers(2, 6))
        bank = gen.standard_normal((m, d))
        delta = float(gen.uniform(0.1, 1.0))
        got = distinct_loss(torch.as_tensor(bank), delta).item()
        total = 0.0
        for i in range(m):
            best = None
            for j in range(m):
                if i == j:
                    continue
                cos = abs(np.dot(bank[i], bank[j])
                          / (np.linalg.norm(bank[i]) * np.linalg.norm(bank[j])))
                dist = 1.0 - cos
                best = dist if best is None else min(best, dist)
            total += max(0.0, delta - best)
        assert got == pytest.approx(total / m, rel=1e-6)
        assert 0.0 <= got <= delta


def test_distinct_loss_validates():
    with pytest.raises(ValueError):
        distinct_loss(torch.eye(1), 0.5)
    bank = torch.eye(3)
    bank[1] = 0.0
    with pytest.raises(ValueError):
        distinct_loss(bank, 0.5)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(distinct_margin=1.5)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)


def test_ema_decay_zero_tracks_raw():
    model = make_tiny_model(zero_init=False)
    ema = Ema(stage1_tensors(model), 0.0)
    with torch.no_grad():
        model.bank += 1.0
    ema.update(stage1_tensors(model))
    assert torch.equal(ema.tensors()["bank"], model.bank.data)


def _tiny_dataset(n=64, size=16, seed=0):
    return gen_shapes(ShapesSpec(n=n, image_size=size, seed=seed,
                                 varying=("shape", "color"), jitter=1,
                                 split_fractions=(1.0, 0.0, 0.0)))


def test_train_joint_one_epoch_checkpoint_roundtrip(tmp_path):
    ds = _tiny_dataset()
    model = make_tiny_model()
    cfg = TrainConfig(epochs=1, batch_size=16, lr=1e-3, ema_decay=0.9, seed=0)
    ckpt = train_joint(ds.images, model, cfg, config_hash="h1")
    path = tmp_path / "joint.ckpt"
    ckpt.save(path)
    loaded = Checkpoint.load(path)
    rebuilt = from_checkpoint(loaded, which="raw")
    assert torch.equal(rebuilt.bank.data, model.bank.data)
    rebuilt_ema = from_checkpoint(loaded, which="ema")
    assert not torch.equal(rebuilt_ema.bank.data, model.bank.data)
    assert loaded.meta["epoch"] == 1


def test_train_joint_reproducible_loss():
    ds = _tiny_dataset()
    finals = []
    for _ in range(2):
        model = make_tiny_model(seed=7)
        cfg = TrainConfig(epochs=2, batch_size=16, lr=1e-3, seed=7)
        ckpt = train_joint(ds.images, model, cfg)
        finals.append(ckpt.meta["loss_tail"][-1])
    assert finals[0] == finals[1]


def test_train_joint_overfits_small_subset():
    ds = _tiny_dataset(n=64)
    model = make_tiny_model(seed=1)
    cfg = TrainConfig(epochs=60, batch_size=16, lr=2e-3, ema_decay=0.9, seed=1)
    ckpt = train_joint(ds.images, model, cfg)
    tail = ckpt.meta["loss_tail"]
    assert tail[-1] < 0.25 * ckpt.meta["initial_loss"]
    # loss trend decreasing: median of last 10 below median of first 10
    assert np.median(tail[-10:]) < np.median(tail[:10])


def test_train_joint_divergence_aborts(monkeypatch):
    # escalating (finite) loss: > 10x the initial epoch for 3 epochs aborts
    ds = _tiny_dataset(n=32)
    model = make_tiny_model(seed=2)
    counter = {"epoch_calls": 0}

    def escalating(x0, rng, m):
        counter["epoch_calls"] += 1
        scale = 1.0 if counter["epoch_calls"] <= 2 else 100.0
        return (m.bank.sum() * 0.0) + scale

    monkeypatch.setattr(training, "ddpm_loss", escalating)
    cfg = TrainConfig(epochs=30, batch_size=16, seed=2)
    with pytest.raises(RuntimeError, match="divergence"):
        train_joint(ds.images, model, cfg)


def test_finetune_weight_zero_matches_plain_continuation():
    ds = _tiny_dataset(n=32)
    model = make_tiny_model(seed=3)
    base = train_joint(ds.images, model, TrainConfig(epochs=1, batch_size=16, seed=3))

    runs = []
    for weight, margin in ((0.0, 0.5), (0.0, 1.0)):
        cfg = TrainConfig(epochs=2, batch_size=16, seed=3,
                          distinct_weight=weight, distinct_margin=margin)
        m = from_checkpoint(base, which="raw")
        ck = training._run_stage1(ds.images, m, cfg, distinct=True,
                                  config_hash="", log_csv=None, start_epoch=0,
                                  ema=ema_from_checkpoint(base), quiet=True,
                                  stage="joint")
        runs.append(ck.meta["loss_tail"][-1])
    # the hinge multiplied by zero cannot alter the trajectory
    assert runs[0] == runs[1]

    m = from_checkpoint(base, which="raw")
    plain = training._run_stage1(ds.images, m, TrainConfig(epochs=2, batch_size=16,
                                                           seed=3),
                                 distinct=False, config_hash="", log_csv=None,
                                 start_epoch=0, ema=ema_from_checkpoint(base),
                                 quiet=True, stage="joint")
    assert plain.meta["loss_tail"][-1] == runs[0]


def test_finetune_distinct_reduces_or_keeps_hinge():
    ds = _tiny_dataset(n=32)
    model = make_tiny_model(seed=4)
    base = train_joint(ds.images, model, TrainConfig(epochs=1, batch_size=16, seed=4))
    before_model = from_checkpoint(base, which="raw")
    before = distinct_loss(before_model.bank, 1.0).item()
    cfg = TrainConfig(epochs=8, batch_size=16, seed=4, lr=2e-3,
                      distinct_margin=1.0, distinct_weight=1.0)
    out = finetune_distinct(base, ds.images, cfg)
    after_model = from_checkpoint(out, which="raw")
    after = distinct_loss(after_model.bank, 1.0).item()
    assert after <= before + 1e-6
    assert "cosine_hist_before" in out.meta and "cosine_hist_after" in out.meta
    assert sum(out.meta["cosine_hist_before"]) == model.m * (model.m - 1)


@pytest.mark.parametrize("margin", [0.5, 1.0])
def test_finetune_supports_both_margins(margin):
    ds = _tiny_dataset(n=32)
    model = make_tiny_model(seed=5)
    base = train_joint(ds.images, model, TrainConfig(epochs=1, batch_size=16, seed=5))
    cfg = TrainConfig(epochs=1, batch_size=16, seed=5, distinct_margin=margin)
    out = finetune_distinct(base, ds.images, cfg)
    assert out.meta["stage"] == "distinct"


def test_train_latent_freezes_encoder_and_stores_stats():
    ds = _tiny_dataset(n=48)
    model = make_tiny_model(seed=6)
    base = train_joint(ds.images, model, TrainConfig(epochs=1, batch_size=16, seed=6))
    cfg = TrainConfig(epochs=1, batch_size=16, seed=6, latent_epochs=3,
                      latent_T=10, latent_hidden=16)
    out = train_latent(base, ds.images, cfg)
    # stage-1 tensors pass through bit-identical
    for k, v in base.tensors.items():
        assert np.array_equal(out.tensors[k], v)
    assert "latent_stats.mean" in out.tensors
    model2 = from_checkpoint(out)
    assert model2.latent_mlp is not None
    # normalization round-trip
    s = np.array([1.0, 2.0, 0.5, 3.0])[:model2.m]
    normed = (s - model2.latent_mean[:len(s)]) / model2.latent_std[:len(s)]
    back = normed * model2.latent_std[:len(s)] + model2.latent_mean[:len(s)]
    assert np.allclose(back, s, atol=1e-12)


def test_train_latent_overfits_small_set():
    # realistic width (m = 32): low-dimensional latents have too much
    # posterior ambiguity for the noise loss to drop far
    ds = _tiny_dataset(n=64)
    model = make_tiny_model(seed=8, m=32)
    base = train_joint(ds.images, model, TrainConfig(epochs=1, batch_size=16, seed=8))
    cfg = TrainConfig(epochs=1, batch_size=16, seed=8, latent_epochs=300,
                      latent_hidden=128, latent_lr=3e-3)
    out = train_latent(base, ds.images, cfg)
    tail = out.meta["latent_loss_tail"]
    assert tail[-1] < 0.25 * out.meta["latent_initial_loss"]


def test_checkpoint_meta_carries_configs(tiny_model):
    ck = to_checkpoint(tiny_model, None, "h", "joint", 0, [])
    assert ck.meta["m"] == tiny_model.m
    assert "enc_cfg" in ck.meta and "den_cfg" in ck.meta
    rebuilt = from_checkpoint(ck, which="raw")
    assert rebuilt.encoder.cfg == tiny_model.encoder.cfg
    assert rebuilt.unet.cfg == tiny_model.unet.cfg

"""Trainer contracts: optimizer math, determinism, resume, divergence."""

import json
import os

import numpy as np
import pytest

import tssl.autodiff as ad
from tssl.data import AugmentConfig, generate_synthetic_dataset
from tssl.models import ModelConfig, init_model, load_checkpoint
from tssl.objective import LossWeights, ScheduleState
from tssl.training import (
    VARIANTS,
    TrainingDiverged,
    TrainSettings,
    checkpoint_meta,
    cosine_lr,
    init_optimizer,
    load_training_checkpoint,
    run_pretraining,
    sgd_step,
    train_epoch,
    train_step,
)

_MODEL = ModelConfig(image_size=16, conv_widths=(4, 8), backbone_dim=12,
                     projector_dim=8, num_factors=3, factor_dim=4,
                     num_prototypes=8)


def _settings(variant="trust_ssl_additive", **kw):
    defaults = dict(variant=variant, epochs=2, batch_size=8, seed=1,
                    checkpoint_every=0, model=_MODEL,
                    augment=AugmentConfig(out_size=16))
    defaults.update(kw)
    return TrainSettings(**defaults)


def _dataset(n=16, seed=0):
    return generate_synthetic_dataset(n, 4, 16, seed=seed)


# ---------------------------------------------------------------------------
# Optimizer pieces


def test_sgd_two_steps_hand_oracle():
    model = init_model(_MODEL, seed=0)
    name = "aux/b"
    p = model.params[name]
    p.data = np.zeros_like(p.data)
    opt = init_optimizer(model)
    g = np.ones_like(p.data)

    class FakeGrads:
        def get(self, t):
            return g if t is p else None

    lr, mu, wd = 0.1, 0.9, 0.0
    sgd_step(model, FakeGrads(), opt, lr, mu, wd)
    # buf = g -> p = -lr * g
    np.testing.assert_allclose(p.data, -0.1 * g, rtol=0, atol=1e-15)
    sgd_step(model, FakeGrads(), opt, lr, mu, wd)
    # buf = 0.9*g + g = 1.9 g -> p = -0.1 g - 0.19 g
    np.testing.assert_allclose(p.data, -0.29 * g, rtol=0, atol=1e-15)


def test_sgd_weight_decay_couples_into_momentum():
    model = init_model(_MODEL, seed=0)
    name = "aux/b"
    p = model.params[name]
    p.data = np.full_like(p.data, 2.0)
    opt = init_optimizer(model)

    class ZeroGrads:
        def get(self, t):
            return np.zeros_like(p.data) if t is p else None

    sgd_step(model, ZeroGrads(), opt, lr=0.5, momentum=0.9, weight_decay=0.1)
    # buf = 0 + 0.1*2 = 0.2 -> p = 2 - 0.5*0.2 = 1.9
    np.testing.assert_allclose(p.data, 1.9, rtol=0, atol=1e-15)


def test_sgd_skips_params_absent_from_graph():
    model = init_model(_MODEL, seed=0)
    before = {k: t.data.copy() for k, t in model.params.items()}
    opt = init_optimizer(model)

    class NoGrads:
        def get(self, t):
            return None

    sgd_step(model, NoGrads(), opt, 0.1, 0.9, 1e-2)
    for k, t in model.params.items():
        np.testing.assert_array_equal(t.data, before[k])


def test_cosine_lr_endpoints():
    assert cosine_lr(0.05, 0, 60) == 0.05
    assert abs(cosine_lr(0.05, 60, 60)) < 1e-17
    assert abs(cosine_lr(0.05, 30, 60) - 0.025) < 1e-15
    # monotone decreasing across epochs
    vals = [cosine_lr(0.05, e, 60) for e in range(61)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# Settings


def test_settings_reject_unknown_variant():
    with pytest.raises(ValueError, match="unknown variant"):
        TrainSettings(variant="supervised")


def test_settings_materialize_defaults():
    s = TrainSettings(epochs=10)
    assert s.schedule.total_epochs == 10
    assert s.augment.out_size == s.model.image_size
    assert s.has_evidential_gate
    assert not TrainSettings(variant="simclr_only").has_evidential_gate
    assert not TrainSettings(variant="cosine_gate").has_evidential_gate
    assert TrainSettings(variant="scalar_uncertainty").has_evidential_gate


# ---------------------------------------------------------------------------
# train_step per variant


def _views(batch=8, seed=0):
    rng = np.random.default_rng(seed)
    v1 = rng.random((batch, 3, 16, 16))
    v2 = rng.random((batch, 3, 16, 16))
    f1 = rng.integers(0, 10, size=batch)
    f2 = rng.integers(0, 10, size=batch)
    return v1, v2, f1, f2


def test_train_step_simclr_only_strips_everything_else():
    s = _settings("simclr_only")
    model = init_model(s.model, seed=1)
    total, bd, k_bar, i_bar = train_step(model, s, 0, *_views())
    assert k_bar is None and i_bar is None
    assert bd.selective == 0.0 and bd.anchor == 0.0 and bd.kl == 0.0
    assert bd.total == bd.base
    grads = ad.backward(total)
    assert grads.get(model.params["factor/0/w"]) is None
    assert grads.get(model.params["evid/0/w"]) is None
    assert grads.get(model.params["proj/fc1/w"]) is not None


def test_train_step_additive_records_gates_and_kl():
    s = _settings("trust_ssl_additive")
    model = init_model(s.model, seed=1)
    total, bd, k_bar, i_bar = train_step(model, s, 0, *_views())
    assert 0.0 <= k_bar < 1.0
    assert 0.0 <= i_bar <= 1.0
    assert bd.kl != 0.0
    assert bd.base_weight == 1.0
    # epoch 0 sits before the selective ramp
    assert bd.lambda_sel == 0.0
    grads = ad.backward(total)
    assert grads.get(model.params["evid/0/w"]) is not None  # via KL
    assert grads.get(model.params["factor/0/w"]) is not None


def test_train_step_additive_selective_gradient_path_is_detached():
    # with the KL weight zeroed the additive variant gives the evidential
    # heads no gradient at all, even while the selective term is active
    s = _settings("trust_ssl_additive",
                  weights=LossWeights(anchor=0.05, diversity=0.1, aux=0.5, kl=0.0),
                  epochs=2,
                  schedule=ScheduleState(total_epochs=2, ramp_start_frac=0.0,
                                         ramp_end_frac=0.5))
    model = init_model(s.model, seed=1)
    total, bd, _, _ = train_step(model, s, 1, *_views())
    assert bd.lambda_sel > 0.0
    grads = ad.backward(total)
    for t in range(s.model.num_factors):
        assert grads.get(model.params[f"evid/{t}/w"]) is None
        assert grads.get(model.params[f"evid/{t}/b"]) is None


def test_train_step_multiplicative_gradients_reach_evidence():
    s = _settings("trust_ssl_multiplicative",
                  weights=LossWeights(anchor=0.05, diversity=0.1, aux=0.5, kl=0.0))
    model = init_model(s.model, seed=1)
    total, bd, k_bar, _ = train_step(model, s, 0, *_views())
    assert k_bar is not None
    # in-graph gate: lambda_sel pinned to the ceiling, base annealed by rho
    assert bd.lambda_sel == s.schedule.lambda_sel_max
    assert bd.base_weight == 1.0  # epoch 0 is before the ramp
    grads = ad.backward(total)
    leaked = max(
        float(np.max(np.abs(grads.adjoint(model.params[f"evid/{t}/w"]))))
        for t in range(s.model.num_factors)
    )
    assert leaked > 1e-8


def test_train_step_multiplicative_base_weight_anneals():
    s = _settings("trust_ssl_multiplicative", epochs=4,
                  schedule=ScheduleState(total_epochs=4))
    model = init_model(s.model, seed=1)
    _, bd, _, _ = train_step(model, s, 3, *_views())
    assert bd.base_weight == 0.0


def test_train_step_cosine_gate_has_no_kl():
    s = _settings("cosine_gate")
    model = init_model(s.model, seed=1)
    total, bd, k_bar, i_bar = train_step(model, s, 0, *_views())
    assert k_bar is None and i_bar is None
    assert bd.kl == 0.0
    grads = ad.backward(total)
    assert grads.get(model.params["evid/0/w"]) is None
    assert grads.get(model.params["gate/tau_raw"]) is None  # gate is detached


def test_train_step_scalar_uncertainty_single_factor():
    model_cfg = ModelConfig(image_size=16, conv_widths=(4, 8), backbone_dim=12,
                            projector_dim=8, num_factors=1, factor_dim=4,
                            num_prototypes=8)
    s = _settings("scalar_uncertainty", model=model_cfg)
    model = init_model(s.model, seed=1)
    total, bd, k_bar, _ = train_step(model, s, 0, *_views())
    assert k_bar is not None
    assert bd.diversity == 0.0  # single factor has no pairs


# ---------------------------------------------------------------------------
# Epoch loop and full runs


def test_train_epoch_drop_last_and_step_rows():
    ds = _dataset(n=20)  # 20 // 8 = 2 batches
    s = _settings(epochs=1)
    model = init_model(s.model, seed=1)
    opt = init_optimizer(model)
    rows = []
    metrics = train_epoch(ds, model, opt, s, 0, step_writer=rows.append)
    assert len(rows) == 2
    assert metrics.epoch == 0
    assert np.isfinite(metrics.mean_total)
    assert rows[0]["step"] == 0 and rows[1]["step"] == 1
    assert 0.0 <= metrics.k_bar < 1.0


def test_training_diverged_raises_with_context():
    ds = _dataset()
    s = _settings()
    model = init_model(s.model, seed=1)
    # plant after the last relu so the NaN survives the forward pass
    model.params["enc/fc/b"].data[:] = np.nan
    opt = init_optimizer(model)
    with pytest.raises(TrainingDiverged) as err, np.errstate(invalid="ignore"):
        train_epoch(ds, model, opt, s, 0)
    assert err.value.epoch == 0
    assert err.value.step == 0
    assert not np.isfinite(err.value.breakdown.total)
    assert "non-finite loss" in str(err.value)


def _read_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f]


def _strip_wall(rows):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]


def test_run_pretraining_is_bit_deterministic(tmp_path):
    ds = _dataset()
    inv1 = run_pretraining(ds, _settings(), str(tmp_path / "a"))
    inv2 = run_pretraining(ds, _settings(), str(tmp_path / "b"))
    assert inv1 == inv2
    ck1 = (tmp_path / "a" / "checkpoint_final.ckpt").read_bytes()
    ck2 = (tmp_path / "b" / "checkpoint_final.ckpt").read_bytes()
    assert ck1 == ck2
    m1 = _strip_wall(_read_jsonl(tmp_path / "a" / "metrics.jsonl"))
    m2 = _strip_wall(_read_jsonl(tmp_path / "b" / "metrics.jsonl"))
    assert m1 == m2
    s1 = _read_jsonl(tmp_path / "a" / "steps.jsonl")
    s2 = _read_jsonl(tmp_path / "b" / "steps.jsonl")
    assert s1 == s2


def test_thread_count_does_not_change_results(tmp_path):
    ds = _dataset()
    run_pretraining(ds, _settings(threads=1), str(tmp_path / "t1"))
    run_pretraining(ds, _settings(threads=3), str(tmp_path / "t3"))
    ck1 = (tmp_path / "t1" / "checkpoint_final.ckpt").read_bytes()
    ck3 = (tmp_path / "t3" / "checkpoint_final.ckpt").read_bytes()
    assert ck1 == ck3


def test_resume_matches_uninterrupted_run(tmp_path):
    ds = _dataset()
    s_full = _settings(epochs=4, checkpoint_every=2)
    run_pretraining(ds, s_full, str(tmp_path / "full"))
    # fresh run of the first two epochs only, then resume for the rest
    run_pretraining(ds, _settings(epochs=4, checkpoint_every=2),
                    str(tmp_path / "part"))
    mid = tmp_path / "part" / "checkpoint_0002.ckpt"
    assert mid.exists()
    run_pretraining(ds, _settings(epochs=4, checkpoint_every=2),
                    str(tmp_path / "resumed"), resume=str(mid))
    want = load_checkpoint(tmp_path / "full" / "checkpoint_final.ckpt")[1]
    got = load_checkpoint(tmp_path / "resumed" / "checkpoint_final.ckpt")[1]
    assert want.keys() == got.keys()
    for name in want:
        np.testing.assert_array_equal(want[name], got[name], err_msg=name)


def test_checkpoint_meta_round_trip(tmp_path):
    ds = _dataset()
    s = _settings(checkpoint_every=1, epochs=1)
    run_pretraining(ds, s, str(tmp_path / "run"),
                    experiment_config={"seed": 1, "variant": s.variant})
    meta, arrays = load_checkpoint(tmp_path / "run" / "checkpoint_final.ckpt")
    assert meta["format"] == "tssl-checkpoint"
    assert meta["variant"] == "trust_ssl_additive"
    assert meta["epoch"] == 1
    assert meta["model"]["image_size"] == 16
    assert meta["model"]["conv_widths"] == [4, 8]
    assert meta["experiment_config"]["seed"] == 1
    assert any(k.startswith("opt/momentum/") for k in arrays)


def test_load_training_checkpoint_restores_momentum(tmp_path):
    ds = _dataset()
    s = _settings(epochs=1, checkpoint_every=1)
    run_pretraining(ds, s, str(tmp_path / "run"))
    model, opt, epoch_next, meta = load_training_checkpoint(
        str(tmp_path / "run" / "checkpoint_final.ckpt"), s)
    assert epoch_next == 1
    _, arrays = load_checkpoint(tmp_path / "run" / "checkpoint_final.ckpt")
    some = 0
    for name, buf in opt.items():
        np.testing.assert_array_equal(buf, arrays[f"opt/momentum/{name}"])
        some += int(np.any(buf != 0.0))
    assert some > 0  # momentum actually accumulated


def test_checkpoint_cadence_names(tmp_path):
    ds = _dataset()
    s = _settings(epochs=5, checkpoint_every=2)
    inv = run_pretraining(ds, s, str(tmp_path / "run"))
    assert inv["checkpoints"] == ["checkpoint_0002.ckpt", "checkpoint_0004.ckpt",
                                  "checkpoint_final.ckpt"]
    for name in inv["checkpoints"]:
        assert (tmp_path / "run" / name).exists()


def test_metrics_rows_match_epochs(tmp_path):
    ds = _dataset()
    s = _settings(epochs=3)
    run_pretraining(ds, s, str(tmp_path / "run"))
    rows = _read_jsonl(tmp_path / "run" / "metrics.jsonl")
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert all("wall_time" in r for r in rows)


def test_all_variants_train_one_epoch(tmp_path):
    ds = _dataset()
    for variant in VARIANTS:
        model_cfg = _MODEL if variant != "scalar_uncertainty" else ModelConfig(
            image_size=16, conv_widths=(4, 8), backbone_dim=12,
            projector_dim=8, num_factors=1, factor_dim=4, num_prototypes=8)
        s = _settings(variant, epochs=1, model=model_cfg)
        inv = run_pretraining(ds, s, str(tmp_path / variant))
        rows = _read_jsonl(tmp_path / variant / "metrics.jsonl")
        assert len(rows) == 1 and np.isfinite(rows[0]["mean_total"]), variant


def test_checkpoint_meta_epoch_counter():
    s = _settings()
    meta = checkpoint_meta(s, epoch_next=7)
    assert meta["epoch"] == 7
    assert "experiment_config" not in meta

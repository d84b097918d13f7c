import json

import numpy as np
import pytest

from sharedformer import autodiff as ad
from sharedformer.autodiff import Tensor
from sharedformer.encoder import ConformerConfig, ParameterStore
from sharedformer.errors import ConfigError, ContractError, DivergenceError
from sharedformer.features import synth_corpus
from sharedformer.masking import MaskPlan
from sharedformer.rng import substream
from sharedformer.training import (AdamState, TrainConfig, adam_step, mpc_loss,
                                   noam_lr, predictor_apply, train)


def rng(seed):
    return np.random.default_rng(seed)


def small_corpus(seed=3):
    return synth_corpus(seed, 24, (15, 30), 16, 4)


def quick_train_config(**overrides):
    base = dict(batch_size=4, max_steps=30, warmup_steps=10, validation_every=10, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


# ---- predictor --------------------------------------------------------------


def test_predictor_zero_weights(float64):
    store = ParameterStore.init(ConformerConfig(), substream(0, "init"))
    store.params["predictor.w"].data[:] = 0.0
    store.params["predictor.b"].data[:] = 0.0
    out = predictor_apply(Tensor(rng(0).normal(size=(5, 16))), store)
    np.testing.assert_array_equal(out.data, np.zeros((5, 16)))


def test_predictor_identity(float64):
    store = ParameterStore.init(ConformerConfig(), substream(0, "init"))
    store.params["predictor.w"].data = np.eye(16)
    store.params["predictor.b"].data[:] = 0.0
    x = rng(1).normal(size=(5, 16))
    np.testing.assert_allclose(predictor_apply(Tensor(x), store).data, x, atol=1e-12)


def test_predictor_gradient(float64):
    store = ParameterStore.init(ConformerConfig(), substream(0, "init"))
    x = rng(2).normal(size=(4, 16))
    target = rng(3).normal(size=(4, 16))
    params = [store.params["predictor.w"], store.params["predictor.b"]]
    err = ad.grad_check(lambda: mpc_loss(predictor_apply(Tensor(x), store), target),
                        params, eps=1e-6)
    assert err <= 1e-4


def test_predictor_shape_contract(float64):
    store = ParameterStore.init(ConformerConfig(), substream(0, "init"))
    with pytest.raises(ContractError):
        predictor_apply(Tensor(np.zeros((5, 7))), store)


# ---- loss -------------------------------------------------------------------


def test_loss_zero_when_equal(float64):
    x = rng(0).normal(size=(6, 4))
    assert float(mpc_loss(Tensor(x), x).data) == 0.0


def test_loss_constant_offset(float64):
    x = rng(1).normal(size=(6, 4))
    loss = mpc_loss(Tensor(x + 0.5), x)
    np.testing.assert_allclose(float(loss.data), 0.5, atol=1e-12)


def test_loss_masked_only_full_plan_equals_all_frames(float64):
    x = rng(2).normal(size=(14, 4))
    pred = Tensor(rng(3).normal(size=(14, 4)))
    plan = MaskPlan([(0, 7), (7, 7)], 14)
    a = float(mpc_loss(pred, x, plan, "all-frames").data)
    b = float(mpc_loss(pred, x, plan, "masked-only").data)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_loss_masked_only_needs_masked_frames(float64):
    x = np.zeros((5, 3))
    with pytest.raises(ContractError):
        mpc_loss(Tensor(x), x, MaskPlan([], 5), "masked-only")


def test_loss_shape_contract(float64):
    with pytest.raises(ContractError):
        mpc_loss(Tensor(np.zeros((3, 2))), np.zeros((2, 3)))


# ---- schedule ---------------------------------------------------------------


def test_noam_crossover():
    w, d, scale = 200, 16, 0.7
    expect = scale * d ** -0.5 * w ** -0.5
    np.testing.assert_allclose(noam_lr(w, w, d, scale), expect, rtol=1e-12)


def test_noam_linear_ramp():
    w, d, scale = 200, 16, 0.7
    crossover = noam_lr(w, w, d, scale)
    np.testing.assert_allclose(noam_lr(w // 4, w, d, scale), crossover / 4, rtol=1e-12)


def test_noam_inverse_sqrt_decay():
    w, d, scale = 200, 16, 0.7
    crossover = noam_lr(w, w, d, scale)
    np.testing.assert_allclose(noam_lr(4 * w, w, d, scale), crossover / 2, rtol=1e-12)


def test_noam_step_contract():
    with pytest.raises(ContractError):
        noam_lr(0, 100, 16, 1.0)


# ---- adam -------------------------------------------------------------------


def _scalar_store(value):
    store = ParameterStore.__new__(ParameterStore)
    store.config = None
    store.params = {"w": Tensor(np.array([value]), requires_grad=True, name="w")}
    store.block_applications = 0
    return store


def test_adam_zero_gradients_leave_params(float64):
    store = _scalar_store(1.5)
    store.params["w"].grad = np.zeros(1)
    state = AdamState()
    adam_step(state, store, lr=0.1)
    assert float(store.params["w"].data[0]) == 1.5
    assert state.step == 1


def test_adam_first_step_is_signed_lr(float64):
    store = _scalar_store(2.0)
    store.params["w"].grad = np.array([0.3])
    adam_step(AdamState(), store, lr=0.01)
    # bias correction makes the first update lr * g / (|g| + eps)
    np.testing.assert_allclose(float(store.params["w"].data[0]),
                               2.0 - 0.01 * 0.3 / (0.3 + 1e-9), rtol=1e-10)


def test_adam_two_steps_match_hand_recurrence(float64):
    b1, b2, eps, lr = 0.9, 0.98, 1e-9, 0.05
    w = 3.0
    m = v = 0.0
    store = _scalar_store(w)
    state = AdamState()
    for t in (1, 2):
        g = 2.0 * w  # d/dw of w^2, evaluated like the training loop would
        store.params["w"].grad = np.array([g])
        adam_step(state, store, lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        np.testing.assert_allclose(float(store.params["w"].data[0]), w, atol=1e-12)


def test_adam_nan_gradient_names_parameter(float64):
    store = _scalar_store(1.0)
    store.params["w"].grad = np.array([np.nan])
    with pytest.raises(DivergenceError, match="'w'"):
        adam_step(AdamState(), store, lr=0.1)


# ---- training loop ----------------------------------------------------------


def test_fixed_depth_logged(tmp_path):
    result = train(small_corpus(), ConformerConfig(),
                   quick_train_config(max_steps=8, depth_mode="fixed", depth_fixed=8))
    assert all(m["sampled_depth"] == 8 for m in result.metrics)


def test_training_deterministic(tmp_path):
    corpus = small_corpus()
    for sub in ("a", "b"):
        train(corpus, ConformerConfig(), quick_train_config(), out_dir=tmp_path / sub)
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    assert (tmp_path / "a/final.ckpt").read_bytes() == (tmp_path / "b/final.ckpt").read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    corpus = small_corpus()
    train(corpus, ConformerConfig(), quick_train_config(max_steps=30),
          out_dir=tmp_path / "full")
    train(corpus, ConformerConfig(), quick_train_config(max_steps=18),
          out_dir=tmp_path / "part")
    train(corpus, ConformerConfig(), quick_train_config(max_steps=30),
          out_dir=tmp_path / "part", resume_from=tmp_path / "part/final.ckpt")
    assert (tmp_path / "full/final.ckpt").read_bytes() == (tmp_path / "part/final.ckpt").read_bytes()
    full = [json.loads(l) for l in (tmp_path / "full/metrics.jsonl").read_text().splitlines()]
    part = [json.loads(l) for l in (tmp_path / "part/metrics.jsonl").read_text().splitlines()]
    assert part == full
    assert part[17]["step"] == 18 and part[18]["step"] == 19  # continues at the saved step


def test_threads_do_not_change_results(tmp_path):
    corpus = small_corpus()
    a = train(corpus, ConformerConfig(), quick_train_config(max_steps=6))
    b = train(corpus, ConformerConfig(), quick_train_config(max_steps=6, threads=4))
    assert [m["train_loss"] for m in a.metrics] == [m["train_loss"] for m in b.metrics]


def test_cumulative_layer_applications(tmp_path):
    cfg = quick_train_config(max_steps=50, depth_mode="uniform", depth_low=2, depth_high=8)
    result = train(small_corpus(), ConformerConfig(), cfg)
    assert result.cum_layer_apps == sum(m["sampled_depth"] * cfg.batch_size for m in result.metrics)


def test_validation_loss_is_deterministic(tmp_path):
    corpus = small_corpus()
    a = train(corpus, ConformerConfig(), quick_train_config(max_steps=10))
    b = train(corpus, ConformerConfig(), quick_train_config(max_steps=10))
    va = [m["val_loss"] for m in a.metrics if m["val_loss"] is not None]
    vb = [m["val_loss"] for m in b.metrics if m["val_loss"] is not None]
    assert va == vb and va


def test_divergence_preserves_last_checkpoint(tmp_path):
    corpus = small_corpus()
    cfg = quick_train_config(max_steps=40, peak_scale=1e30, warmup_steps=1)
    with pytest.raises(DivergenceError):
        train(corpus, ConformerConfig(), cfg, out_dir=tmp_path)
    assert (tmp_path / "final.ckpt").exists()


def test_train_config_contracts():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(depth_mode="linear")

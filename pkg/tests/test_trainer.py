"""Contrastive/classification objective and teacher-loop contracts."""
import math

import numpy as np
import pytest

from dceeg import autodiff as ad
from dceeg.eeg_encoder import ConformerConfig
from dceeg.text_encoder import TextEncoderConfig
from dceeg.trainer import (ClipBatchState, EpochStats, TeacherModel, TrainError,
                           TrainRunConfig, clip_losses, cross_entropy, fit,
                           predict, train_teacher)

LN4 = math.log(4.0)


def toy_eeg(**kw):
    base = dict(num_layers=1, num_heads=2, model_dim=16, temporal_filters=4,
                prompt_count_per_layer=2, latent_dim=16, electrodes=3,
                window_samples=32, conv_stride=8, conv_kernel=7, dropout=0.0)
    base.update(kw)
    return ConformerConfig(**base)


def toy_text(**kw):
    base = dict(num_layers=1, num_heads=2, hidden_dim=16, prompt_count_per_layer=2,
                max_seq_len=8, latent_dim=16, attention_dropout=0.0,
                hidden_dropout=0.0)
    base.update(kw)
    return TextEncoderConfig(**base)


def toy_run(**kw):
    base = dict(epochs=3, batch_size=16, lr=1e-3, alpha=0.5, sigma_init=2.0,
                weight_decay=0.0, seed=3, precision="f64")
    base.update(kw)
    return TrainRunConfig(**base)


def separable_data(rng, n=64, e=3, l=32, rate=32.0):
    t = np.arange(l) / rate
    xs, ys = [], []
    for i in range(n):
        cls = i % 2
        f = 3.0 if cls == 0 else 11.0
        x = 0.3 * rng.standard_normal((e, l)) + np.sin(
            2 * np.pi * f * t + rng.uniform(0, 2 * np.pi, (e, 1)))
        xs.append(x)
        ys.append(cls)
    return np.asarray(xs), np.asarray(ys)


def synthetic_state(rng, b=6, k=4, alpha=0.5, logits=None):
    v = rng.normal(size=(b, 8))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    u = rng.normal(size=(k, 8))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    sigma = ad.Tensor(np.asarray(3.0))
    l_eeg = ad.Tensor(logits if logits is not None else 3.0 * v @ u.T,
                      dtype=np.float64)
    l_txt = ad.transpose(l_eeg)
    cls_logits = ad.Tensor(rng.normal(size=(b, k)), dtype=np.float64)
    y = rng.integers(0, k, size=b)
    return ClipBatchState(V=ad.Tensor(v), U=ad.Tensor(u), sigma=sigma,
                          l_eeg=l_eeg, l_txt=l_txt, cls_logits=cls_logits,
                          alpha=alpha, contrastive_idx=y), y


# ---------------------------------------------------------------------------
# loss identities
# ---------------------------------------------------------------------------

def test_uniform_logits_give_ln_c():
    logits = ad.Tensor(np.zeros((5, 4)), dtype=np.float64)
    ce = cross_entropy(logits, np.array([0, 1, 2, 3, 0]), axis=1)
    assert abs(float(ce.data) - LN4) <= 1e-9


def test_perfect_logits_give_near_zero_ce(rng):
    y = np.array([0, 2, 1])
    logits = np.zeros((3, 3))
    logits[np.arange(3), y] = 1e6
    ce = cross_entropy(ad.Tensor(logits, dtype=np.float64), y, axis=1)
    assert float(ce.data) <= 1e-9


def test_alpha_endpoints_exact(rng):
    state, y = synthetic_state(rng, alpha=1.0)
    l1, l2, total = clip_losses(state, y)
    assert float(total.data) == float(l1.data)
    state, y = synthetic_state(rng, alpha=0.0)
    l1, l2, total = clip_losses(state, y)
    assert float(total.data) == float(l2.data)


def test_total_is_alpha_mix(rng):
    state, y = synthetic_state(rng, alpha=0.25)
    l1, l2, total = clip_losses(state, y)
    assert abs(float(total.data)
               - (0.25 * float(l1.data) + 0.75 * float(l2.data))) <= 1e-9


def test_target_out_of_range(rng):
    state, y = synthetic_state(rng)
    with pytest.raises(TrainError, match="out of range"):
        clip_losses(state, np.full_like(y, 17))


def test_l_txt_is_exact_transpose_and_ce_symmetric(rng):
    state, y = synthetic_state(rng)
    assert np.array_equal(state.l_txt.data, state.l_eeg.data.T)
    direct = cross_entropy(state.l_txt, y, axis=0)
    via_transpose = cross_entropy(ad.transpose(state.l_eeg), y, axis=0)
    assert abs(float(direct.data) - float(via_transpose.data)) <= 1e-9


def test_sigma_rescaling_keeps_argmax(rng):
    state, _ = synthetic_state(rng)
    for c in (0.5, 3.0, 100.0):
        assert np.array_equal(state.l_eeg.data.argmax(axis=1),
                              (c * state.l_eeg.data).argmax(axis=1))
        assert np.array_equal(state.l_txt.data.argmax(axis=0),
                              (c * state.l_txt.data).argmax(axis=0))


def test_total_gradient_is_alpha_combination(rng):
    """Linearity: grad(total) == alpha*grad(L1) + (1-alpha)*grad(L2) on a
    fixed toy batch, parameter by parameter."""
    x, y = separable_data(rng, n=8)
    alpha = 0.3
    run = toy_run(alpha=alpha)
    model = TeacherModel.build(["bckg", "seiz"], toy_eeg(), toy_text(), run)
    params = model.trainable()

    def grads_of(which):
        ad.zero_grad(params.values())
        state = model.forward_batch(x.astype(np.float64), y)
        l1, l2, total = clip_losses(state, y)
        ad.backward({"l1": l1, "l2": l2, "total": total}[which], params.values())
        return {k: p.grad.copy() for k, p in params.items()}

    g1, g2, gt = grads_of("l1"), grads_of("l2"), grads_of("total")
    for name in params:
        np.testing.assert_allclose(gt[name], alpha * g1[name] + (1 - alpha) * g2[name],
                                   atol=1e-6)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_empty_dataset_rejected():
    with pytest.raises(TrainError, match="empty"):
        train_teacher(np.zeros((0, 3, 32)), np.zeros(0, dtype=int), ["bckg", "seiz"],
                      toy_eeg(), toy_text(), toy_run())


def test_sigma_positive_at_every_step(rng):
    x, y = separable_data(rng, n=32)
    run = toy_run(epochs=5, lr=5e-3)
    model = TeacherModel.build(["bckg", "seiz"], toy_eeg(), toy_text(), run)
    sigmas = []
    for epoch in range(run.epochs):
        fit(model, x, y, TrainRunConfig(**{**vars(run), "epochs": 1}))
        sigmas.append(float(model.sigma().data))
    assert all(s > 0 for s in sigmas)


def test_training_makes_progress_and_converges(rng):
    x, y = separable_data(rng, n=96)
    run = toy_run(epochs=60, lr=3e-3, precision="f32")
    model, curves = train_teacher(x, y, ["bckg", "seiz"], toy_eeg(), toy_text(), run)
    first = np.mean([c.loss for c in curves[:10]])
    last = np.mean([c.loss for c in curves[-10:]])
    assert last <= first
    assert curves[-1].accuracy >= 0.95


def test_same_seed_identical_final_loss_f64(rng):
    x, y = separable_data(rng, n=24)
    run = toy_run(epochs=4, precision="f64")
    _, curves_a = train_teacher(x, y, ["bckg", "seiz"], toy_eeg(), toy_text(), run)
    _, curves_b = train_teacher(x, y, ["bckg", "seiz"], toy_eeg(), toy_text(), run)
    assert curves_a[-1].loss == curves_b[-1].loss
    assert [c.loss for c in curves_a] == [c.loss for c in curves_b]


def test_curves_are_ndjson(tmp_path, rng):
    import json
    x, y = separable_data(rng, n=16)
    run = toy_run(epochs=2)
    path = tmp_path / "curves.ndjson"
    train_teacher(x, y, ["bckg", "seiz"], toy_eeg(), toy_text(), run, curve_path=path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert set(rec) == {"epoch", "split", "loss", "accuracy"}


def test_in_batch_contrastive_mode_trains(rng):
    x, y = separable_data(rng, n=32)
    run = toy_run(epochs=2, contrastive_targets="in_batch")
    model, curves = train_teacher(x, y, ["bckg", "seiz"], toy_eeg(), toy_text(), run)
    assert np.isfinite(curves[-1].loss)


# ---------------------------------------------------------------------------
# prediction and persistence
# ---------------------------------------------------------------------------

@pytest.fixture
def trained(rng):
    x, y = separable_data(rng, n=48)
    run = toy_run(epochs=25, lr=2e-3, precision="f32",
                  early_stop_accuracy=1.0, early_stop_patience=2)
    model, _ = train_teacher(x, y, ["bckg", "seiz"], toy_eeg(), toy_text(), run)
    return model, x, y


def test_predict_probabilities_sum_to_one(trained):
    model, x, _ = trained
    probs_cls, probs_zero = predict(model, x)
    np.testing.assert_allclose(probs_cls.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(probs_zero.sum(axis=1), 1.0, atol=1e-9)


def test_predict_duplicated_rows_duplicated_probs(trained):
    model, x, _ = trained
    dup = np.stack([x[0], x[0], x[3]])
    probs, _ = predict(model, dup)
    assert np.array_equal(probs[0], probs[1])
    assert not np.array_equal(probs[0], probs[2])


def test_checkpoint_roundtrip_preserves_outputs(tmp_path, trained):
    model, x, y = trained
    before, before_zero = predict(model, x[:8])
    model.save(tmp_path / "teacher")
    loaded = TeacherModel.load(tmp_path / "teacher")
    after, after_zero = predict(loaded, x[:8])
    np.testing.assert_array_equal(before, after)
    np.testing.assert_array_equal(before_zero, after_zero)
    assert loaded.class_names == model.class_names
    assert loaded.prompts == model.prompts


def test_checkpoint_config_mismatch_rejected(tmp_path, trained):
    model, _, _ = trained
    model.save(tmp_path / "teacher")
    meta_path = (tmp_path / "teacher.meta.json")
    meta = meta_path.read_text().replace('"num_layers": 1', '"num_layers": 2')
    meta_path.write_text(meta)
    with pytest.raises(TrainError, match="mismatch"):
        TeacherModel.load(tmp_path / "teacher")


def test_latent_width_mismatch_rejected():
    with pytest.raises(TrainError, match="latent width"):
        TeacherModel.build(["bckg", "seiz"], toy_eeg(latent_dim=16),
                           toy_text(latent_dim=8), toy_run())

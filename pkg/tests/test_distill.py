"""Distillation objective and frozen-teacher contracts. Closed-form KL
values were evaluated by hand with the 0*log0 := 0 convention."""
import math

import numpy as np
import pytest

from dceeg import autodiff as ad
from dceeg.checkpoint import save_tensors
from dceeg.distill import (DistillConfig, DistillError, StudentModel, distill,
                           distill_loss, epochs_to_accuracy, kl_divergence,
                           soften)
from dceeg.eeg_encoder import ConformerConfig
from dceeg.text_encoder import TextEncoderConfig
from dceeg.trainer import TeacherModel, TrainRunConfig, predict, train_teacher

LN2 = math.log(2.0)


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


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------

def test_kl_of_identical_distributions_is_zero():
    p = np.array([[0.2, 0.3, 0.5], [0.9, 0.05, 0.05]])
    assert kl_divergence(p, p) == 0.0
    assert kl_divergence(p, p, "student_ref") == 0.0


def test_kl_hand_value_with_exact_zero_reference():
    # Q = [1, 0] reference, P = [0.5, 0.5]: sum Q log(Q/P) = log 2
    q = np.array([[1.0, 0.0]])
    p = np.array([[0.5, 0.5]])
    assert abs(kl_divergence(p, q, "teacher_ref") - LN2) <= 1e-12


def test_kl_asymmetry_hand_values():
    p = np.array([[0.9, 0.1]])
    q = np.array([[0.6, 0.4]])
    teacher_ref = 0.6 * math.log(0.6 / 0.9) + 0.4 * math.log(0.4 / 0.1)
    student_ref = 0.9 * math.log(0.9 / 0.6) + 0.1 * math.log(0.1 / 0.4)
    assert abs(kl_divergence(p, q, "teacher_ref") - teacher_ref) <= 1e-12
    assert abs(kl_divergence(p, q, "student_ref") - student_ref) <= 1e-12
    assert kl_divergence(p, q, "teacher_ref") != kl_divergence(p, q, "student_ref")


def test_kl_nonnegative_random(rng):
    for _ in range(50):
        p = rng.dirichlet(np.ones(5), size=4)
        q = rng.dirichlet(np.ones(5), size=4)
        assert kl_divergence(p, q, "teacher_ref") >= 0.0
        assert kl_divergence(p, q, "student_ref") >= 0.0


def test_kl_rejects_non_probability_rows():
    with pytest.raises(DistillError, match="not probability"):
        kl_divergence(np.array([[0.5, 0.6]]), np.array([[0.5, 0.5]]))


def test_soften_rows_normalized(rng):
    s = rng.normal(size=(6, 4))
    t = rng.normal(size=(6, 4))
    for temp in (1.0, 3.0, 5.0):
        soft = soften(s, t, temp)
        np.testing.assert_allclose(soft.P.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(soft.Q.sum(axis=1), 1.0, atol=1e-9)
        assert soft.per_sample_kl.min() >= 0.0


def test_softening_approaches_uniform_monotonically(rng):
    logits = rng.normal(size=(8, 5)) * 3.0
    devs = []
    for temp in (1.0, 3.0, 5.0, 10.0):
        p = soften(logits, logits, temp).P
        devs.append(np.abs(p - 1.0 / 5.0).max())
    assert devs == sorted(devs, reverse=True)


# ---------------------------------------------------------------------------
# distillation loss
# ---------------------------------------------------------------------------

def test_unit_temperature_total(rng):
    s = ad.Tensor(rng.normal(size=(5, 3)), requires_grad=True, dtype=np.float64)
    t = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, size=5)
    cfg = DistillConfig(temperature=1.0, alpha=0.3)
    ce, kl, total = distill_loss(s, t, y, cfg)
    assert abs(float(total.data)
               - (0.3 * float(ce.data) + 0.7 * float(kl.data))) <= 1e-12


def test_t_squared_factor(rng):
    s = ad.Tensor(rng.normal(size=(5, 3)), requires_grad=True, dtype=np.float64)
    t = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, size=5)
    cfg = DistillConfig(temperature=3.0, alpha=0.25)
    ce, kl, total = distill_loss(s, t, y, cfg)
    assert abs(float(total.data)
               - (0.25 * float(ce.data) + 0.75 * 9.0 * float(kl.data))) <= 1e-12


def test_matching_logits_zero_kl(rng):
    logits = rng.normal(size=(4, 3))
    s = ad.Tensor(logits, requires_grad=True, dtype=np.float64)
    y = rng.integers(0, 3, size=4)
    cfg = DistillConfig(temperature=2.0, alpha=0.6)
    ce, kl, total = distill_loss(s, logits, y, cfg)
    assert abs(float(kl.data)) <= 1e-12
    assert abs(float(total.data) - 0.6 * float(ce.data)) <= 1e-12


def test_alpha_one_detaches_teacher(rng):
    s = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64)
    t = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64)
    y = rng.integers(0, 3, size=4)
    _, _, total = distill_loss(s, t, y, DistillConfig(temperature=1.0, alpha=1.0))
    ad.backward(total, [s, t])
    assert np.abs(s.grad).max() > 0.0
    np.testing.assert_array_equal(t.grad, np.zeros_like(t.grad))


def test_invalid_temperature_rejected():
    with pytest.raises(ValueError, match="temperature"):
        DistillConfig(temperature=0.0)


@pytest.mark.parametrize("direction", ["teacher_ref", "student_ref"])
def test_distill_loss_gradient_matches_finite_differences(direction, rng):
    s = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    t = rng.normal(size=(3, 4))
    y = rng.integers(0, 4, size=3)
    cfg = DistillConfig(temperature=2.5, alpha=0.4, kl_direction=direction)

    def loss():
        return distill_loss(s, t, y, cfg)[2]

    report = ad.finite_diff_check(loss, {"s": s}, tolerance=1e-4)
    assert report.passed, report.worst


def test_distill_loss_kl_consistent_with_numeric_kl(rng):
    s_logits = rng.normal(size=(6, 4))
    t_logits = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, size=6)
    for direction in ("teacher_ref", "student_ref"):
        cfg = DistillConfig(temperature=3.0, alpha=0.5, kl_direction=direction)
        s = ad.Tensor(s_logits, dtype=np.float64, requires_grad=True)
        _, kl, _ = distill_loss(s, t_logits, y, cfg)
        soft = soften(s_logits, t_logits, 3.0, direction)
        assert abs(float(kl.data) - soft.per_sample_kl.mean()) <= 1e-9
        assert abs(float(kl.data) - kl_divergence(soft.P, soft.Q, direction)) <= 1e-9


# ---------------------------------------------------------------------------
# full distillation
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def teacher_and_data():
    rng = np.random.default_rng(42)
    x, y = separable_data(rng, n=64)
    run = TrainRunConfig(epochs=40, batch_size=16, lr=2e-3, alpha=0.5, sigma_init=2.0,
                         weight_decay=0.0, seed=5, precision="f32",
                         early_stop_accuracy=1.0, early_stop_patience=2)
    model, curves = train_teacher(x, y, ["bckg", "seiz"], toy_eeg(), toy_text(), run)
    return model, x, y, curves


def test_distilled_student_tracks_teacher(teacher_and_data):
    teacher, x, y, _ = teacher_and_data
    cfg = DistillConfig(temperature=1.0, alpha=0.5, lr=2e-3, weight_decay=0.0,
                        epochs=40, batch_size=16, seed=6, precision="f32",
                        early_stop_accuracy=1.0, early_stop_patience=2)
    student, curves, updated = distill(teacher, toy_eeg(conv_stride=16).student_of(
        num_layers=1, conv_stride=16), x, y, cfg)
    t_acc = (predict(teacher, x)[0].argmax(1) == y).mean()
    s_acc = (predict(student, x)[0].argmax(1) == y).mean()
    assert s_acc >= t_acc - 0.03


def test_update_set_contains_only_student_tensors(teacher_and_data):
    teacher, x, y, _ = teacher_and_data
    cfg = DistillConfig(epochs=1, lr=1e-3, batch_size=16, seed=1, precision="f32")
    _, _, updated = distill(teacher, toy_eeg().student_of(num_layers=1), x, y, cfg)
    assert updated
    assert all(name.startswith("student/") for name in updated)
    assert not any(name.startswith(("eeg_encoder/", "text_encoder/", "clip/"))
                   for name in updated)


def test_teacher_frozen_through_distillation(teacher_and_data, tmp_path):
    teacher, x, y, _ = teacher_and_data
    before_params = {k: t.data.copy() for k, t in teacher.params().items()}
    before_out = predict(teacher, x[:8])[0]
    save_tensors(tmp_path / "before.ckpt", before_params)

    cfg = DistillConfig(epochs=3, lr=2e-3, batch_size=16, seed=2, precision="f32")
    distill(teacher, toy_eeg().student_of(num_layers=1), x, y, cfg)

    after_params = {k: t.data for k, t in teacher.params().items()}
    save_tensors(tmp_path / "after.ckpt", after_params)
    assert (tmp_path / "before.ckpt").read_bytes() == (tmp_path / "after.ckpt").read_bytes()
    np.testing.assert_array_equal(before_out, predict(teacher, x[:8])[0])


def test_student_checkpoint_roundtrip(teacher_and_data, tmp_path):
    teacher, x, y, _ = teacher_and_data
    cfg = DistillConfig(epochs=2, lr=1e-3, batch_size=16, seed=3, precision="f32")
    student, _, _ = distill(teacher, toy_eeg().student_of(num_layers=1), x, y, cfg)
    before, before_zero = predict(student, x[:8])
    student.save(tmp_path / "student")
    loaded = StudentModel.load(tmp_path / "student")
    after, after_zero = predict(loaded, x[:8])
    np.testing.assert_array_equal(before, after)
    np.testing.assert_array_equal(before_zero, after_zero)


def test_latent_mismatch_rejected(teacher_and_data):
    teacher, x, y, _ = teacher_and_data
    bad = toy_eeg(latent_dim=8).student_of(num_layers=1)
    with pytest.raises(DistillError, match="latent"):
        distill(teacher, bad, x, y, DistillConfig(epochs=1))


def test_student_converges_faster_than_teacher(teacher_and_data):
    teacher, x, y, teacher_curves = teacher_and_data
    cfg = DistillConfig(temperature=1.0, alpha=0.5, lr=2e-3, weight_decay=0.0,
                        epochs=40, batch_size=16, seed=6, precision="f32")
    _, student_curves, _ = distill(teacher, toy_eeg().student_of(num_layers=1),
                                   x, y, cfg)
    t_epochs = epochs_to_accuracy(teacher_curves, 0.95)
    s_epochs = epochs_to_accuracy(student_curves, 0.95)
    assert t_epochs is not None and s_epochs is not None
    assert s_epochs < t_epochs


def test_epochs_to_accuracy_none_when_unreached():
    from dceeg.trainer import EpochStats
    curves = [EpochStats(0, "train", 1.0, 0.5), EpochStats(1, "train", 0.9, 0.6)]
    assert epochs_to_accuracy(curves, 0.95) is None
    assert epochs_to_accuracy(curves, 0.55) == 2

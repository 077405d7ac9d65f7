import math

import numpy as np
import pytest

import consloss as cl


def test_conservative_anchors():
    spec = cl.LossSpec.conservative(cl.E, 1.0)
    assert cl.eval_loss(spec, 0.9) == pytest.approx(-1.80, abs=0.01)
    assert cl.eval_loss(spec, 0.1) == pytest.approx(1.42, abs=0.01)
    assert abs(cl.eval_loss(spec, cl.INV_E)) <= 1e-12
    assert abs(cl.eval_grad(spec, cl.INV_E)) <= 1e-9


def test_closed_form_oracle_vectorized():
    p = np.linspace(1e-4, 1 - 1e-4, 501)
    for a in (2.0, cl.E, 3.0, 4.0):
        la = np.log(p) / np.log(a)
        expected = 5.0 * (1 + la) ** 2 * np.log(-la) / np.log(a)
        got = cl.eval_loss(cl.LossSpec.conservative(a, 5.0), p)
        assert got.shape == p.shape
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


def test_update_grad_switches_sign():
    spec = cl.LossSpec.conservative(cl.E, 5.0)
    p = np.array([0.05, 0.2, 0.6, 0.95])
    grad, upd = cl.eval_grad(spec, p), cl.eval_update_grad(spec, p)
    np.testing.assert_array_equal(np.sign(upd), np.sign(cl.eval_loss(spec, p)) * np.sign(grad))
    # cross entropy is plain descent everywhere
    ce = cl.LossSpec.cross_entropy()
    np.testing.assert_allclose(cl.eval_update_grad(ce, p), -1.0 / p)


def test_zero_points():
    assert cl.zero_point(cl.LossSpec.conservative(2.0)) == pytest.approx(0.5, abs=1e-12)
    assert cl.zero_point(cl.LossSpec.cubic1()) == pytest.approx(0.5, abs=1e-12)
    assert cl.zero_point(cl.LossSpec.cubic3()) == pytest.approx(1 / math.e, abs=1e-12)
    assert cl.zero_point(cl.LossSpec.cross_entropy()) is None


def test_invalid_inputs_raise():
    with pytest.raises(cl.DomainError):
        cl.eval_loss(cl.LossSpec.conservative(1.0), 0.5)
    with pytest.raises(ValueError):
        cl.eval_loss(cl.LossSpec.cross_entropy(), 0.0)
    with pytest.raises(cl.ConfigError, match="schedule.speed"):
        cl.resolve_config('{"schedule": {"speed": 1}}')


def test_gradcheck_and_planted_fault():
    lines = cl.gradcheck()
    assert len(lines) == 9
    assert all(l["max_rel_error"] < l["tolerance"] for l in lines)
    assert any(l["max_rel_error"] >= l["tolerance"] for l in cl.gradcheck(plant_fault=True))


def test_iou_matches_set_definition():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 4, size=(9, 7))
    pred = rng.integers(0, 4, size=(9, 7))
    ious = cl.iou_per_class(pred, gt, 4)
    for c, v in enumerate(ious):
        inter = np.sum((pred == c) & (gt == c))
        union = np.sum((pred == c) | (gt == c))
        assert v == pytest.approx(inter / union, abs=1e-15)
    assert cl.mean_iou(pred, gt, 4) == pytest.approx(np.mean(ious))
    assert cl.iou_per_class(np.zeros((1, 2)), np.zeros((1, 2)), 2) == [1.0, None]


def test_label_topology_covers_every_class():
    m = cl.label_topology(7, 16, 16, 5)
    assert m.shape == (16, 16)
    assert set(np.unique(m)) == set(range(5))
    np.testing.assert_array_equal(m, cl.label_topology(7, 16, 16, 5))


def test_config_echo_and_hash():
    echo = cl.resolve_config("{}")
    assert cl.resolve_config(echo) == echo
    assert cl.config_hash(echo) == cl.config_hash("{}")
    assert len(cl.config_hash()) == 16


SMALL = """{
  "dataset": {"height": 12, "width": 12, "n_source_train": 6, "n_source_eval": 2,
              "n_target_train": 6, "n_target_eval": 2},
  "model": {"embed_width": 8, "hidden_width": 8, "disc_width": 8},
  "schedule": {"total_steps": 20, "eval_every": 5}
}"""


def test_train_small_run_is_deterministic():
    a = cl.train(SMALL)
    b = cl.train(SMALL)
    assert not a["aborted"]
    assert len(a["history"]) == 20
    assert a["history"] == b["history"]
    assert [r["active_loss"] for r in a["history"]][9:11] == ["CrossEntropy", "Conservative"]
    evals = [r for r in a["history"] if r["target_miou"] is not None]
    assert [r["step"] for r in evals] == [5, 10, 15, 20]
    for r in a["history"]:
        assert r["l_gan_e"]["source_label"] == 1 - r["l_gan_d"]["source_label"]
    assert cl.train(SMALL, seed=3)["history"] != a["history"]

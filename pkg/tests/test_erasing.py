import csv
import math

import numpy as np
import pytest

from minmax_wsl.autograd import Tensor, ops
from minmax_wsl.autograd.tensor import backward
from minmax_wsl.erasing import (
    STEP_FIELDS,
    ErasingError,
    accumulate_mask,
    compute_trust,
    run_recursive_erasing,
    write_step_log,
)
from minmax_wsl.losses import loss_secondary
from minmax_wsl.masks import binarize
from minmax_wsl.nets import ActivationStack, WSLModel


class ToyLocalizer:
    """Maps = first channel rescaled by its per-image max; scores from a free logit vector.

    Scores do not depend on the image, so every step keeps H_t == H_0 and the
    prediction fixed. The brightest remaining blob always becomes the mask.
    """

    def __init__(self, logits):
        self.theta = Tensor(np.asarray(logits, dtype=np.float64), requires_grad=True)
        self.forward_count = 0

    def __call__(self, x, train_mode=False, rng=None):
        x = np.asarray(x)
        n, c = x.shape[0], self.theta.shape[0]
        peak = x[:, 0].reshape(n, -1).max(axis=1)
        base = x[:, 0] / np.where(peak > 0, peak, 1.0)[:, None, None]
        maps = Tensor(np.repeat(base[:, None], c, axis=1))
        logits = ops.mul(Tensor(np.ones((n, c))), self.theta)
        self.forward_count += n
        return ActivationStack(maps, ops.softmax(logits, axis=-1), logits)


class ToyModel:
    def __init__(self, cfg, logits):
        self.cfg = cfg
        self.localizer = ToyLocalizer(logits)

    def localizer_parameters(self):
        return {"theta": self.localizer.theta}


def two_blob_image(size=16):
    img = np.zeros((1, 1, size, size))
    img[0, 0, 2:6, 2:6] = 1.0
    img[0, 0, 9:14, 8:13] = 0.4
    return img


class TestTrust:
    def test_t0_correct_equals_true_class_probability(self):
        psi, gamma = compute_trust(0, np.array([0.2, 0.8]), 1, 0.3, 0.3, 10)
        assert psi == gamma == 0.8

    def test_wrong_prediction(self):
        assert compute_trust(2, np.array([0.7, 0.3]), 1, 0.1, 1.0, 10) == (0.0, 0.0)

    def test_loss_increase_untrusted(self):
        assert compute_trust(1, np.array([0.1, 0.9]), 1, 0.5, 0.4, 10)[0] == 0.0

    def test_decay(self):
        psi, _ = compute_trust(10, np.array([0.0, 1.0]), 1, 0.0, 0.0, 10)
        assert psi == pytest.approx(math.exp(-1), abs=1e-12)
        assert psi == pytest.approx(0.3679, abs=1e-4)

    def test_tie_goes_to_lowest_index(self):
        p = np.array([0.5, 0.5])
        assert compute_trust(0, p, 0, 0.0, 0.0, 10)[0] == 0.5
        assert compute_trust(0, p, 1, 0.0, 0.0, 10)[0] == 0.0

    @pytest.mark.parametrize("t,sigma", [(-1, 10), (0, 0)])
    def test_rejects_bad_arguments(self, t, sigma):
        with pytest.raises(ValueError):
            compute_trust(t, np.array([0.5, 0.5]), 0, 0.0, 0.0, sigma)


class TestAccumulate:
    def test_example(self):
        out = accumulate_mask(np.array([0.2, 0.9]), np.array([0.8, 0.4]), 0.5)
        np.testing.assert_allclose(out, [0.4, 0.9])

    def test_zero_psi_keeps_accumulator(self):
        acc = np.array([0.3, 0.1])
        np.testing.assert_array_equal(accumulate_mask(acc, np.ones(2), 0.0), acc)

    def test_unit_psi_from_zero(self):
        r = np.array([0.3, 0.7])
        np.testing.assert_array_equal(accumulate_mask(np.zeros(2), r, 1.0), r)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            accumulate_mask(np.zeros(2), np.zeros(3), 0.5)


class TestToyFixture:
    def test_second_blob_is_mined(self, tiny_cfg):
        x = two_blob_image()
        model0 = ToyModel(tiny_cfg.replace(u=0), [0.0, 2.0])
        model4 = ToyModel(tiny_cfg.replace(u=4), [0.0, 2.0])
        first = binarize(run_recursive_erasing(model0, x, [1]).masks[0]).astype(bool)
        full = binarize(run_recursive_erasing(model4, x, [1]).masks[0]).astype(bool)
        assert first[2:6, 2:6].all() and not first[9:14, 8:13].any()
        assert np.all(full[first]) and full.sum() > first.sum()
        assert full[9:14, 8:13].all()

    def test_wrong_label_leaves_zero_accumulator(self, tiny_cfg):
        model = ToyModel(tiny_cfg.replace(u=4), [0.0, 2.0])
        res = run_recursive_erasing(model, two_blob_image(), [0])
        assert np.array_equal(res.masks, np.zeros_like(res.masks))
        assert res.forwards.tolist() == [1]

    def test_gradient_sums_trusted_steps(self, tiny_cfg):
        model = ToyModel(tiny_cfg.replace(u=3), [0.0, 2.0])
        res = run_recursive_erasing(model, two_blob_image(), [1])
        trusted = sum(s.trusted for s in res.steps)
        p = np.exp([0.0, 2.0]) / np.exp([0.0, 2.0]).sum()
        # d(-log p1)/d theta = p - e1; step 0 always counts, later steps when trusted
        expected = (1 + sum(s.trusted for s in res.steps if s.t > 0)) * (p - np.array([0.0, 1.0]))
        assert trusted >= 1
        np.testing.assert_allclose(res.localizer_grads["theta"], expected, rtol=1e-12)


def _batch(rng, n=4, size=16):
    return rng.normal(size=(n, 3, size, size)), np.arange(n) % 2


class TestRealModel:
    def test_forward_budget_and_log(self, tiny_cfg, rng):
        cfg = tiny_cfg.replace(u=3, dropout=0.5)
        model = WSLModel(cfg)
        x, y = _batch(rng, 6)
        res = run_recursive_erasing(model, x, y, cfg, np.random.default_rng(1))
        assert np.all(res.forwards >= 1) and np.all(res.forwards <= cfg.u + 1)
        assert model.localizer.forward_count == res.forwards.sum()
        for s in res.steps:
            if s.trusted:
                assert s.pred == s.label and s.h_t <= s.h_0
        # a stopped sample never reappears
        by_id = {}
        for s in res.steps:
            by_id.setdefault(s.sample_id, []).append(s)
        for recs in by_id.values():
            assert [r.t for r in recs] == list(range(len(recs)))
            assert all(r.trusted for r in recs[:-1])

    def test_u0_single_forward(self, tiny_cfg, rng):
        model = WSLModel(tiny_cfg.replace(u=0))
        x, y = _batch(rng)
        res = run_recursive_erasing(model, x, y)
        assert res.forwards.tolist() == [1, 1, 1, 1]

    def test_u0_gradient_equals_plain_backward(self, tiny_cfg, rng):
        cfg = tiny_cfg.replace(u=0, dropout=0.75)
        x, y = _batch(rng)
        a = WSLModel(cfg)
        res = run_recursive_erasing(a, x, y, cfg, np.random.default_rng(5))
        b = WSLModel(cfg)
        stack = b.localizer(x, train_mode=True, rng=np.random.default_rng(5))
        backward(ops.sum(loss_secondary(stack.scores, y)))
        for name, p in b.localizer_parameters().items():
            assert np.array_equal(res.localizer_grads[name], p.grad), name

    def test_accumulator_non_decreasing_over_steps(self, tiny_cfg, rng):
        # with a fixed rng, the run for u=k reproduces the first k+1 steps of any longer run
        x, y = _batch(rng, 6)
        prev = None
        for u in range(5):
            cfg = tiny_cfg.replace(u=u, dropout=0.5)
            acc = run_recursive_erasing(WSLModel(cfg), x, y, cfg, np.random.default_rng(9)).masks
            assert np.all((acc >= 0) & (acc <= 1))
            if prev is not None:
                assert np.all(acc >= prev)
            prev = acc

    def test_misclassified_at_t0_zero_accumulator(self, tiny_cfg, rng):
        model = WSLModel(tiny_cfg.replace(u=4))
        x, _ = _batch(rng, 4)
        pred = model.localizer(x).scores.data.argmax(axis=1)
        res = run_recursive_erasing(model, x, 1 - pred)
        assert np.array_equal(res.masks, np.zeros_like(res.masks))
        assert res.forwards.tolist() == [1, 1, 1, 1]

    def test_negative_u_rejected(self, tiny_cfg, rng):
        x, y = _batch(rng)
        with pytest.raises(ValueError, match="u must be"):
            run_recursive_erasing(WSLModel(tiny_cfg), x, y, tiny_cfg.replace(u=-1))

    def test_nan_input_aborts(self, tiny_cfg):
        model = ToyModel(tiny_cfg, [0.0, 0.0])
        model.localizer.theta.data[:] = np.nan
        with pytest.raises((ErasingError, ValueError)):
            run_recursive_erasing(model, two_blob_image(), [1])


def test_step_log_csv(tmp_path, tiny_cfg):
    model = ToyModel(tiny_cfg.replace(u=2), [0.0, 2.0])
    res = run_recursive_erasing(model, two_blob_image(), [1], ids=["img7"])
    path = tmp_path / "log.csv"
    write_step_log(path, res.steps, {"epoch": 0})
    write_step_log(path, res.steps, {"epoch": 1})
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["epoch"] + STEP_FIELDS
    assert len(rows) == 2 * len(res.steps)
    assert rows[0]["sample_id"] == "img7"

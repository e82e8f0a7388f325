import numpy as np
import pytest
import torch

from fanet.inference import binarize, iterative_predict, predict_once
from fanet.network import FANet, NetworkConfig

TINY = dict(base_widths=(4, 8, 16, 32))


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return FANet(NetworkConfig.for_ablation("B4", **TINY)).eval()


@pytest.fixture(scope="module")
def image():
    rng = np.random.default_rng(0)
    gray = rng.uniform(0.1, 0.3, (32, 32))
    gray[8:20, 10:22] = 0.8
    return np.repeat(gray[:, :, None], 3, 2).astype(np.float32)


class TestBinarize:
    def test_boundary_inclusive(self):
        out = binarize(np.full((3, 3), 0.5))
        assert (out == 1).all()

    def test_just_below_boundary(self):
        out = binarize(np.full((3, 3), 0.4999))
        assert (out == 0).all()

    def test_matches_elementwise_comparison(self):
        rng = np.random.default_rng(1)
        prob = rng.random((16, 16))
        assert np.array_equal(binarize(prob, 0.5), (prob >= 0.5).astype(np.uint8))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            binarize(np.array([[1.5]]))


class TestIterativePredict:
    def test_trace_length(self, model, image):
        trace = iterative_predict(model, image, iterations=1)
        assert len(trace) == 2  # Otsu-seeded prediction plus one refinement

    def test_ten_iterations_default_cap(self, model, image):
        trace = iterative_predict(model, image, iterations=3)
        assert len(trace) == 4
        for mask in trace.masks:
            assert mask.shape == (1, 32, 32)
            assert set(np.unique(mask)) <= {0, 1}

    def test_zero_iterations_rejected(self, model, image):
        with pytest.raises(ValueError):
            iterative_predict(model, image, iterations=0)

    def test_deterministic(self, model, image):
        a = iterative_predict(model, image, iterations=3)
        b = iterative_predict(model, image, iterations=3)
        for ma, mb in zip(a.masks, b.masks):
            assert np.array_equal(ma, mb)
        for pa, pb in zip(a.probabilities, b.probabilities):
            assert np.array_equal(pa, pb)

    def test_fixed_point_absorbs(self, model, image):
        trace = iterative_predict(model, image, iterations=6)
        t = trace.converged_at()
        assert t is not None, "expected the untrained net to reach a fixed point quickly"
        for s in range(t, len(trace.masks)):
            assert np.array_equal(trace.masks[s], trace.masks[t - 1])

    def test_early_stop_shortens_single_image_trace(self, model, image):
        full = iterative_predict(model, image, iterations=6)
        stopped = iterative_predict(model, image, iterations=6, early_stop=True)
        assert len(stopped) <= len(full)
        if full.converged_at() is not None:
            assert len(stopped) == full.converged_at() + 1

    def test_f1_recorded_with_targets(self, model, image):
        target = np.zeros((32, 32), np.uint8)
        target[8:20, 10:22] = 1
        trace = iterative_predict(model, image, iterations=2, targets=target)
        assert trace.f1_per_iteration is not None
        assert len(trace.f1_per_iteration) == 3
        assert all(0.0 <= trace.mean_f1(t) <= 1.0 for t in range(3))

    def test_batched_shapes(self, model, image):
        batch = np.stack([image, image[::-1].copy()])
        trace = iterative_predict(model, batch, iterations=2)
        assert trace.masks[0].shape == (2, 32, 32)


class TestPredictOnce:
    def test_single_forward_from_otsu(self, model, image):
        probs, masks = predict_once(model, image)
        assert probs.shape == (1, 32, 32)
        assert (probs > 0).all() and (probs < 1).all()
        assert np.array_equal(masks, binarize(probs, model.cfg.binarize_threshold))

    def test_matches_trace_entry_zero(self, model, image):
        probs, _ = predict_once(model, image)
        trace = iterative_predict(model, image, iterations=1)
        assert np.array_equal(probs, trace.probabilities[0])

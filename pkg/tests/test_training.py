import math

import numpy as np
import pytest
import torch

from fanet.data import Sample
from fanet.mask_codec import rle_decode
from fanet.network import NetworkConfig
from fanet.training import (
    PlateauScheduler,
    TrainConfig,
    bce_loss,
    combined_loss,
    dice_loss,
    fit,
    make_state,
    train_epoch,
)

from _oracles import central_difference

TINY_NET = dict(base_widths=(4, 8, 16, 32))


def blob_samples(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n):
        mask = np.zeros((size, size), dtype=np.uint8)
        cy, cx = rng.integers(8, size - 8, 2)
        r = rng.integers(3, 7)
        yy, xx = np.ogrid[:size, :size]
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
        gray = 0.2 + 0.6 * mask + rng.normal(0, 0.05, (size, size))
        image = np.repeat(np.clip(gray, 0, 1)[:, :, None], 3, 2).astype(np.float32)
        samples.append(Sample(f"s{k:03d}", image, mask))
    return samples


class ListData:
    def __init__(self, samples):
        self._by_id = {s.sample_id: s for s in samples}
        self.sample_ids = [s.sample_id for s in samples]

    def __len__(self):
        return len(self.sample_ids)

    def get(self, sid):
        return self._by_id[sid]


class TestDiceLoss:
    def test_perfect_match_is_zero(self):
        target = (torch.rand(1, 1, 8, 8) > 0.5).float()
        assert float(dice_loss(target.clone(), target, smooth=1.0)) == pytest.approx(0.0)

    def test_disjoint_masks_approach_one(self):
        pred = torch.zeros(1, 1, 64, 64)
        pred[..., :32, :] = 1.0
        target = torch.zeros(1, 1, 64, 64)
        target[..., 32:, :] = 1.0
        loss = float(dice_loss(pred, target, smooth=1.0))
        n = 2048  # |P| = |T| = 2048
        assert loss == pytest.approx(1.0 - 1.0 / (2 * n + 1))

    def test_half_coverage_hand_value(self):
        # pred = 0.5 everywhere, target = half the pixels, smooth -> 0
        pred = torch.full((1, 1, 16, 16), 0.5)
        target = torch.zeros(1, 1, 16, 16)
        target[..., :8, :] = 1.0
        loss = float(dice_loss(pred, target, smooth=1e-8))
        assert loss == pytest.approx(0.5, abs=1e-6)

    def test_range(self):
        rng = torch.Generator().manual_seed(0)
        for _ in range(20):
            pred = torch.rand(1, 1, 10, 10, generator=rng)
            target = (torch.rand(1, 1, 10, 10, generator=rng) > 0.5).float()
            v = float(dice_loss(pred, target))
            assert 0.0 <= v < 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_loss(torch.rand(1, 1, 4, 4), torch.rand(1, 1, 8, 8))


class TestCombinedLoss:
    def test_near_perfect_is_near_zero(self):
        eps = 1e-4
        target = (torch.rand(1, 1, 16, 16) > 0.5).float()
        pred = target * (1 - eps) + (1 - target) * eps
        assert float(combined_loss(pred, target)) < 0.01

    def test_hand_value_half_coverage(self):
        # BCE = ln 2; dice = 0.5 at smooth -> 0
        pred = torch.full((1, 1, 16, 16), 0.5)
        target = torch.zeros(1, 1, 16, 16)
        target[..., :8, :] = 1.0
        total = float(combined_loss(pred, target, smooth=1e-8))
        assert total == pytest.approx(math.log(2) + 0.5, abs=1e-5)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        pred = torch.rand(4, 4, dtype=torch.float64) * 0.8 + 0.1
        pred.requires_grad_(True)
        target = (torch.rand(4, 4) > 0.5).double()
        loss = combined_loss(pred, target)
        loss.backward()
        with torch.no_grad():
            flat = pred
            for idx in [(0, 0), (1, 2), (3, 3), (2, 1)]:
                fd = central_difference(
                    lambda: combined_loss(flat, target), flat.data, idx, eps=1e-6
                )
                assert pred.grad[idx].item() == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_permutation_invariance(self):
        torch.manual_seed(1)
        pred = torch.rand(1, 1, 6, 6)
        target = (torch.rand(1, 1, 6, 6) > 0.5).float()
        perm = torch.randperm(36)
        shuffled = combined_loss(
            pred.flatten()[perm].view(1, 1, 6, 6), target.flatten()[perm].view(1, 1, 6, 6)
        )
        assert float(shuffled) == pytest.approx(float(combined_loss(pred, target)), rel=1e-6)

    def test_non_negative(self):
        torch.manual_seed(2)
        for _ in range(10):
            pred = torch.rand(1, 1, 5, 5)
            target = (torch.rand(1, 1, 5, 5) > 0.5).float()
            assert float(combined_loss(pred, target)) >= 0.0
            assert float(bce_loss(pred, target)) >= 0.0


class TestPlateauScheduler:
    def _sched(self, patience=3, factor=0.1):
        opt = torch.optim.Adam([torch.nn.Parameter(torch.zeros(1))], lr=1e-2)
        return PlateauScheduler(opt, factor=factor, patience=patience, min_lr=1e-7)

    def test_constant_loss_reduces_exactly_once(self):
        sched = self._sched(patience=3)
        sched.step(1.0)  # establishes the best value
        for _ in range(3 + 1):  # patience+1 non-improving epochs
            sched.step(1.0)
        assert sched.num_reductions == 1
        assert sched.lr == pytest.approx(1e-3)

    def test_no_reduction_while_within_patience(self):
        sched = self._sched(patience=3)
        sched.step(1.0)
        for _ in range(3):
            sched.step(1.0)
        assert sched.num_reductions == 0

    def test_improvement_resets_counter(self):
        sched = self._sched(patience=2)
        sched.step(1.0)
        sched.step(1.0)
        sched.step(0.5)  # improvement resets
        for _ in range(2):
            sched.step(0.5)
        assert sched.num_reductions == 0

    def test_min_lr_clamp(self):
        sched = self._sched(patience=0, factor=0.1)
        sched.step(1.0)
        for _ in range(10):
            sched.step(1.0)
        assert sched.lr == pytest.approx(1e-7)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(dice_smooth=0)

    def test_dict_roundtrip(self):
        cfg = TrainConfig(epochs=3, learning_rate=1e-3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"momentum": 0.9})


class TestTrainEpoch:
    def _state(self, seed=0, **net_kw):
        train_cfg = TrainConfig(
            epochs=3, learning_rate=1e-3, batch_size=4, seed=seed, val_fraction=0.0
        )
        net_cfg = NetworkConfig.for_ablation("B4", **{**TINY_NET, **net_kw})
        return train_cfg, make_state(train_cfg, net_cfg)

    def test_store_updated_with_predictions_after_epoch_zero(self):
        _, state = self._state()
        data = ListData(blob_samples(6))
        consumed = {}

        def hook(epoch, ids, masks):
            for sid, m in zip(ids, masks):
                consumed.setdefault(epoch, {})[sid] = m.copy()

        train_epoch(state, data, feedback_hook=hook)
        assert len(state.train_store) == 6
        for sid in data.sample_ids:
            assert state.train_store.epoch_of(sid) == 0
            # epoch 0 consumed the Otsu seed
            assert np.array_equal(consumed[0][sid], data.get(sid).otsu_mask())
            stored = state.train_store.get(sid)
            assert set(np.unique(stored)) <= {0, 1}

    def test_feedback_masks_flow_between_epochs(self):
        _, state = self._state()
        data = ListData(blob_samples(6))
        consumed = {}
        stored_after = {}

        def hook(epoch, ids, masks):
            for sid, m in zip(ids, masks):
                consumed.setdefault(epoch, {})[sid] = m.copy()

        for _ in range(3):
            train_epoch(state, data, feedback_hook=hook)
            epoch = state.epoch - 1
            stored_after[epoch] = {
                sid: rle_decode(state.train_store.entries[sid][0])
                for sid in data.sample_ids
            }

        for epoch in (1, 2):
            for sid in data.sample_ids:
                assert np.array_equal(consumed[epoch][sid], stored_after[epoch - 1][sid])

    def test_loss_history_one_entry_per_epoch(self):
        _, state = self._state()
        data = ListData(blob_samples(4))
        for k in range(3):
            train_epoch(state, data)
            assert len(state.loss_history) == k + 1

    def test_deterministic_loss_history(self):
        data = ListData(blob_samples(6))
        histories = []
        for _ in range(2):
            _, state = self._state(seed=42)
            for _ in range(2):
                train_epoch(state, data)
            histories.append(list(state.loss_history))
        assert histories[0] == histories[1]


class TestFit:
    def test_empty_dataset_rejected(self):
        cfg = TrainConfig(epochs=1)
        with pytest.raises(ValueError):
            fit(cfg, NetworkConfig.for_ablation("B4", **TINY_NET), ListData([]))

    def test_single_epoch_runs_once(self, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=4, val_fraction=0.0, learning_rate=1e-3)
        result = fit(
            cfg,
            NetworkConfig.for_ablation("B4", **TINY_NET),
            ListData(blob_samples(4)),
            out_dir=tmp_path,
        )
        assert len(result.history) == 1
        assert (tmp_path / "checkpoint_final.pt").exists()
        assert (tmp_path / "checkpoint_best.pt").exists()
        assert (tmp_path / "training_log.csv").exists()
        assert (tmp_path / "masks" / "train.rlestore").exists()

    def test_holds_out_validation_split(self, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=4, val_fraction=0.25, seed=1)
        result = fit(
            cfg,
            NetworkConfig.for_ablation("B4", **TINY_NET),
            ListData(blob_samples(8)),
            out_dir=tmp_path,
        )
        assert not math.isnan(result.history[0]["val_loss"])
        assert (tmp_path / "masks" / "val.rlestore").exists()

    def test_loss_strictly_decreases_on_easy_data(self):
        cfg = TrainConfig(epochs=5, batch_size=4, val_fraction=0.0, learning_rate=1e-3, seed=0)
        result = fit(
            cfg,
            NetworkConfig.for_ablation("B4", **TINY_NET),
            ListData(blob_samples(16)),
        )
        losses = [row["train_loss"] for row in result.history]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_augmented_training_expands_dataset(self):
        cfg = TrainConfig(
            epochs=1, batch_size=4, val_fraction=0.0, augment_per_sample=2, seed=0
        )
        result = fit(
            cfg,
            NetworkConfig.for_ablation("B4", **TINY_NET),
            ListData(blob_samples(3)),
        )
        # 3 base + 6 augmented variants, each with its own feedback mask
        assert len(result.state.train_store) == 9
        assert any("#a" in sid for sid in result.state.train_store.entries)

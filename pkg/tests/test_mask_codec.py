import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from fanet.mask_codec import (
    MaskShapeError,
    MaskStore,
    RleMask,
    StaleEpochError,
    downscale_mask,
    export_mask_png,
    otsu_threshold,
    rle_decode,
    rle_encode,
)

from _oracles import brute_force_otsu, naive_downscale


class TestRle:
    def test_all_zero_mask(self):
        rle = rle_encode(np.zeros((2, 2), dtype=np.uint8))
        assert rle.runs == (4,)

    def test_leading_ones(self):
        mask = np.array([[1, 1], [0, 0]], dtype=np.uint8)
        assert rle_encode(mask).runs == (0, 2, 2)

    def test_decode_all_zero(self):
        assert (rle_decode(RleMask(2, 2, (4,))) == 0).all()

    def test_decode_all_one(self):
        assert (rle_decode(RleMask(2, 2, (0, 4))) == 1).all()

    def test_decode_hand_expansion(self):
        mask = rle_decode(RleMask(2, 2, (1, 2, 1)))
        assert mask.tolist() == [[0, 1], [1, 0]]

    def test_decode_rejects_bad_sum(self):
        with pytest.raises(MaskShapeError):
            RleMask(2, 2, (1, 2))

    def test_rejects_zero_interior_run(self):
        with pytest.raises(MaskShapeError):
            RleMask(2, 2, (2, 0, 2))

    def test_rejects_non_binary(self):
        with pytest.raises(MaskShapeError):
            rle_encode(np.array([[0, 2]], dtype=np.uint8))

    def test_roundtrip_1000_random_64x64(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            p = rng.uniform(0.0, 1.0)
            mask = (rng.random((64, 64)) < p).astype(np.uint8)
            assert np.array_equal(rle_decode(rle_encode(mask)), mask)

    def test_compresses_structured_masks(self):
        mask = np.zeros((64, 64), np.uint8)
        mask[16:48, 16:48] = 1
        rle = rle_encode(mask)
        assert len(rle.runs) < mask.size  # far fewer runs than pixels

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(
            np.uint8,
            st.tuples(st.integers(1, 17), st.integers(1, 17)),
            elements=st.integers(0, 1),
        )
    )
    def test_roundtrip_property(self, mask):
        assert np.array_equal(rle_decode(rle_encode(mask)), mask)

    def test_reencode_canonical(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            mask = (rng.random((9, 13)) < rng.uniform(0, 1)).astype(np.uint8)
            rle = rle_encode(mask)
            again = rle_encode(rle_decode(rle))
            assert again == rle


class TestOtsu:
    def test_constant_image(self):
        mask, thr = otsu_threshold(np.full((5, 5), 42, dtype=np.uint8))
        assert (mask == 0).all()
        assert thr == 42

    def test_perfectly_bimodal(self):
        img = np.full((10, 10), 10, dtype=np.uint8)
        img[:, 4:] = 200  # 60 pixels at 200, 40 at 10
        mask, thr = otsu_threshold(img)
        assert 10 < thr < 200
        assert np.array_equal(mask, (img == 200).astype(np.uint8))

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(3)
        for trial in range(30):
            if trial % 3 == 0:
                img = rng.integers(0, 256, (24, 24)).astype(np.uint8)
            elif trial % 3 == 1:
                img = np.where(
                    rng.random((24, 24)) < 0.4,
                    rng.normal(60, 12, (24, 24)),
                    rng.normal(180, 20, (24, 24)),
                ).clip(0, 255).astype(np.uint8)
            else:
                img = rng.normal(128, 30, (24, 24)).clip(0, 255).astype(np.uint8)
            _, thr = otsu_threshold(img)
            assert thr == brute_force_otsu(img), f"trial {trial}"

    def test_mask_is_strictly_above_threshold(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, (16, 16)).astype(np.uint8)
        mask, thr = otsu_threshold(img)
        assert np.array_equal(mask, (img > thr).astype(np.uint8))

    def test_color_converts_to_luminance(self):
        rng = np.random.default_rng(9)
        rgb = rng.random((8, 8, 3)).astype(np.float32)
        lum = rgb.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
        _, thr_rgb = otsu_threshold(rgb)
        _, thr_lum = otsu_threshold(lum)
        assert thr_rgb == thr_lum

    def test_float_image_threshold_separates_classes(self):
        rng = np.random.default_rng(13)
        img = np.where(rng.random((32, 32)) < 0.5, 0.2, 0.8) + rng.normal(0, 0.01, (32, 32))
        mask, thr = otsu_threshold(img)
        assert 0.2 < thr < 0.8
        assert mask.sum() == (img > 0.5).sum()

    def test_rejects_non_finite(self):
        img = np.array([[0.0, np.nan]])
        with pytest.raises(ValueError):
            otsu_threshold(img)


class TestDownscale:
    def test_all_zero(self):
        assert (downscale_mask(np.zeros((4, 4), np.uint8), 2, 2) == 0).all()

    def test_single_one_stays_in_window(self):
        mask = np.zeros((4, 4), np.uint8)
        mask[0, 0] = 1
        out = downscale_mask(mask, 2, 2)
        assert out.tolist() == [[1, 0], [0, 0]]

    def test_matches_naive_window_or(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            mask = (rng.random((64, 64)) < 0.1).astype(np.uint8)
            assert np.array_equal(downscale_mask(mask, 8, 8), naive_downscale(mask, 8, 8))

    def test_non_divisible_rejected(self):
        with pytest.raises(MaskShapeError):
            downscale_mask(np.zeros((6, 6), np.uint8), 4, 4)


class TestMaskStore:
    def test_put_get_roundtrip(self):
        store = MaskStore()
        mask = (np.random.default_rng(0).random((8, 8)) < 0.5).astype(np.uint8)
        store.put("a", mask, epoch=0)
        assert np.array_equal(store.get("a"), mask)

    def test_last_write_wins(self):
        store = MaskStore()
        store.put("a", np.zeros((4, 4), np.uint8), epoch=1)
        second = np.ones((4, 4), np.uint8)
        store.put("a", second, epoch=2)
        assert np.array_equal(store.get("a"), second)
        assert store.epoch_of("a") == 2

    def test_stale_epoch_rejected(self):
        store = MaskStore()
        store.put("a", np.zeros((4, 4), np.uint8), epoch=2)
        with pytest.raises(StaleEpochError):
            store.put("a", np.ones((4, 4), np.uint8), epoch=1)

    def test_absent_id_falls_back_to_otsu(self):
        store = MaskStore()
        img = np.full((6, 6), 10, dtype=np.uint8)
        img[2:, :] = 200
        expected, _ = otsu_threshold(img)
        assert np.array_equal(store.get("missing", image=img), expected)

    def test_absent_id_without_image_raises(self):
        with pytest.raises(KeyError):
            MaskStore().get("missing")

    def test_many_random_roundtrips(self):
        rng = np.random.default_rng(31)
        store = MaskStore()
        masks = {}
        for k in range(100):
            sid = f"s{k}"
            masks[sid] = (rng.random((16, 16)) < rng.uniform(0, 1)).astype(np.uint8)
            store.put(sid, masks[sid], epoch=0)
        for sid, mask in masks.items():
            assert np.array_equal(store.get(sid), mask)

    def test_survives_reopen(self, tmp_path):
        rng = np.random.default_rng(17)
        store = MaskStore()
        for k in range(10):
            store.put(f"s{k}", (rng.random((12, 20)) < 0.3).astype(np.uint8), epoch=k)
        path = tmp_path / "masks.rlestore"
        store.save(path)
        loaded = MaskStore.load(path)
        assert loaded.entries == store.entries

    def test_reopen_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.rlestore"
        path.write_text("not a store\n")
        with pytest.raises(ValueError):
            MaskStore.load(path)

    def test_export_png_values(self, tmp_path):
        store = MaskStore()
        mask = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        store.put("a", mask, epoch=0)
        out = tmp_path / "a.png"
        export_mask_png(store, "a", out)
        with Image.open(out) as im:
            data = np.asarray(im)
        assert set(np.unique(data)) <= {0, 255}
        assert np.array_equal(data, mask * 255)

"""Patch division, cropping, and patch-list serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imagerag.errors import BoundsError, DataError
from imagerag.imaging import (
    Box,
    DivisionMethod,
    ImageRef,
    cascade_grid_count,
    crop,
    divide_cascade_grid,
    divide_complete_cover,
    divide_vit,
    read_patch_list,
    whole_image_patch,
    write_patch_list,
)

from conftest import make_image
from oracles import coverage_holds, interval_cover_exact


class TestBox:
    def test_area_and_accessors(self):
        box = Box(2, 3, 10, 7)
        assert box.width == 8
        assert box.height == 4
        assert box.area == 32

    def test_rejects_empty(self):
        with pytest.raises(DataError):
            Box(5, 5, 5, 10)

    def test_rejects_inverted(self):
        with pytest.raises(DataError):
            Box(10, 0, 5, 5)

    def test_rejects_negative(self):
        with pytest.raises(DataError):
            Box(-1, 0, 5, 5)


class TestVitDivision:
    def test_exact_fit_single_tile(self):
        image = ImageRef.from_size("a", 448, 448)
        patches = divide_vit(image, 448)
        assert len(patches) == 1
        assert patches[0].box == Box(0, 0, 448, 448)
        assert not patches[0].degenerate

    def test_exact_2x2_grid(self):
        image = ImageRef.from_size("a", 896, 896)
        patches = divide_vit(image, 448)
        assert len(patches) == 4
        boxes = {p.box.as_tuple() for p in patches}
        assert boxes == {
            (0, 0, 448, 448), (448, 0, 896, 448),
            (0, 448, 448, 896), (448, 448, 896, 896),
        }

    def test_edge_shifted_tiles(self):
        # ceil(1000/448)=3 columns, ceil(600/448)=2 rows; final anchors at dim-448
        image = ImageRef.from_size("a", 1000, 600)
        patches = divide_vit(image, 448)
        assert len(patches) == 6
        xs = sorted({p.box.x1 for p in patches})
        ys = sorted({p.box.y1 for p in patches})
        assert xs == [0, 448, 552]
        assert ys == [0, 152]
        assert all(p.box.width == 448 and p.box.height == 448 for p in patches)

    def test_degenerate_small_image(self):
        image = ImageRef.from_size("a", 100, 900)
        patches = divide_vit(image, 448)
        assert len(patches) == 1
        assert patches[0].degenerate
        assert patches[0].box == Box(0, 0, 100, 900)

    def test_coverage_small_images(self):
        for w, h in [(30, 20), (17, 33), (48, 48)]:
            image = ImageRef.from_size("a", w, h)
            boxes = [p.box.as_tuple() for p in divide_vit(image, 16)]
            assert coverage_holds(w, h, boxes)


class TestCascadeGrid:
    def test_count_law_for_default_depth(self):
        image = ImageRef.from_size("a", 5602, 4445)
        assert len(divide_cascade_grid(image, 10)) == 385

    def test_single_cell(self):
        image = ImageRef.from_size("a", 50, 70)
        patches = divide_cascade_grid(image, 1)
        assert len(patches) == 1
        assert patches[0].box == Box(0, 0, 50, 70)

    def test_n2_gives_five(self):
        image = ImageRef.from_size("a", 100, 100)
        assert len(divide_cascade_grid(image, 2)) == 5

    @given(
        n=st.integers(min_value=1, max_value=8),
        w=st.integers(min_value=8, max_value=200),
        h=st.integers(min_value=8, max_value=200),
    )
    @settings(deadline=None, max_examples=60)
    def test_count_law_property(self, n, w, h):
        image = ImageRef.from_size("a", w, h)
        assert len(divide_cascade_grid(image, n)) == cascade_grid_count(n)

    def test_each_level_tiles_exactly(self):
        image = ImageRef.from_size("a", 37, 23)
        patches = divide_cascade_grid(image, 4)
        for k in range(1, 5):
            level = [p for p in patches if p.scale_level == k]
            assert len(level) == k * k
            area = sum(p.box.area for p in level)
            assert area == 37 * 23  # disjoint interiors + full union
            assert coverage_holds(37, 23, [p.box.as_tuple() for p in level])

    def test_remainder_goes_to_last_row_col(self):
        image = ImageRef.from_size("a", 1000, 1000)
        level3 = [p for p in divide_cascade_grid(image, 3) if p.scale_level == 3]
        widths = sorted({p.box.width for p in level3})
        assert widths == [333, 334]
        last = max(level3, key=lambda p: (p.box.y2, p.box.x2))
        assert last.box.width == 334

    def test_too_small_image_rejected(self):
        image = ImageRef.from_size("a", 3, 100)
        with pytest.raises(DataError):
            divide_cascade_grid(image, 5)

    def test_determinism(self):
        image = ImageRef.from_size("a", 123, 77)
        first = divide_cascade_grid(image, 5)
        second = divide_cascade_grid(image, 5)
        assert [p.patch_id for p in first] == [p.patch_id for p in second]


class TestCompleteCover:
    def test_doubling_levels_4000(self):
        image = ImageRef.from_size("a", 4000, 4000)
        patches = divide_complete_cover(image, 20)
        sides = sorted({p.box.width for p in patches if p.scale_level > 0})
        assert sides == [200, 400, 800, 1600, 3200]
        whole = [p for p in patches if p.scale_level == 0]
        assert len(whole) == 1 and whole[0].box == Box(0, 0, 4000, 4000)

    def test_typical_uhr_image_counts(self):
        image = ImageRef.from_size("a", 5602, 4445)
        patches = divide_complete_cover(image, 20)
        smallest = min(p.box.width for p in patches)
        assert 180 <= smallest <= 280
        assert 300 <= len(patches) <= 900

    def test_small_image_coverage_both_levels(self):
        image = ImageRef.from_size("a", 256, 256)
        patches = divide_complete_cover(image, 2)
        assert {p.box.width for p in patches} == {128, 256}
        level1 = [p.box.as_tuple() for p in patches if p.box.width == 128]
        assert coverage_holds(256, 256, level1)
        assert coverage_holds(256, 256, [p.box.as_tuple() for p in patches])

    def test_every_level_covers_whole_image(self):
        image = ImageRef.from_size("a", 1037, 713)
        patches = divide_complete_cover(image, 9)
        levels = {p.scale_level for p in patches}
        for level in levels:
            boxes = [p.box for p in patches if p.scale_level == level]
            xs = [(b.x1, b.x2) for b in boxes]
            ys = [(b.y1, b.y2) for b in boxes]
            assert interval_cover_exact(1037, xs)
            assert interval_cover_exact(713, ys)

    def test_rejects_tiny_scale(self):
        image = ImageRef.from_size("a", 100, 100)
        with pytest.raises(DataError):
            divide_complete_cover(image, 1)


class TestCrop:
    def test_identity_crop(self):
        image = make_image("a", 32, 24, seed=1)
        out = crop(image, Box(0, 0, 32, 24))
        assert np.array_equal(out, image.pixels)

    def test_crop_composition(self):
        image = make_image("a", 64, 64, seed=2)
        outer = crop(image, Box(8, 8, 48, 48))
        inner_direct = crop(image, Box(18, 20, 30, 28))
        inner_via_outer = outer[12:20, 10:22]
        assert np.array_equal(inner_direct, inner_via_outer)

    def test_single_pixel(self):
        image = make_image("a", 16, 16, seed=3)
        out = crop(image, Box(5, 6, 6, 7))
        assert out.shape == (1, 1, 3)
        assert np.array_equal(out[0, 0], image.pixels[6, 5])

    def test_out_of_bounds_rejected(self):
        image = make_image("a", 16, 16, seed=4)
        with pytest.raises(BoundsError):
            crop(image, Box(8, 8, 17, 12))

    def test_deterministic_bytes(self):
        image = make_image("a", 40, 40, seed=5)
        a = crop(image, Box(3, 4, 21, 30))
        b = crop(image, Box(3, 4, 21, 30))
        assert a.tobytes() == b.tobytes()

    def test_loaded_pixels_are_readonly(self):
        image = make_image("a", 8, 8, seed=6)
        with pytest.raises(ValueError):
            image.pixels[0, 0, 0] = 1


class TestPatchList:
    def test_roundtrip(self, tmp_path):
        image = ImageRef.from_size("scene", 100, 80)
        patches = divide_cascade_grid(image, 3) + [whole_image_patch(image)]
        path = tmp_path / "patches.tsv"
        count = write_patch_list(path, patches)
        assert count == len(patches)
        loaded = read_patch_list(path)
        assert [p.patch_id for p in loaded] == [p.patch_id for p in patches]
        assert [p.box for p in loaded] == [p.box for p in patches]

    def test_patch_id_stability(self):
        image = ImageRef.from_size("img", 64, 64)
        first = divide_vit(image, 32)[2]
        second = divide_vit(image, 32)[2]
        assert first.patch_id == second.patch_id
        assert first.patch_id.startswith("img/vit/")


class TestOrdering:
    def test_scale_major_then_row_major(self):
        image = ImageRef.from_size("a", 60, 60)
        patches = divide_cascade_grid(image, 3)
        levels = [p.scale_level for p in patches]
        assert levels == sorted(levels)
        level2 = [p for p in patches if p.scale_level == 2]
        keys = [(p.box.y1, p.box.x1) for p in level2]
        assert keys == sorted(keys)

"""
Tests for Dice, clDice, Betti numbers and topology-preserving resizing.
"""
import numpy as np
import pytest
from scipy import ndimage

from topotta.errors import InvalidArgumentError
from topotta.metrics.topology import (
    aggregate,
    betti_convention,
    betti_error,
    betti_numbers,
    cldice,
    dice,
    evaluate,
    resize_area,
    resize_label,
    resize_nearest,
    skeletonize,
)
from topotta.synth.generator import domain_preset, generate


def disk(size, centre, radius):
    rows, cols = np.ogrid[:size, :size]
    return (rows - centre[0]) ** 2 + (cols - centre[1]) ** 2 <= radius ** 2


def ring(size, centre, outer, inner):
    return disk(size, centre, outer) & ~disk(size, centre, inner)


def union_find_betti(mask):
    """Independent (b0, b1) by union-find over pixels."""
    h, w = mask.shape

    def count(cells, neighbours):
        parent = {cell: cell for cell in cells}

        def find(cell):
            while parent[cell] != cell:
                parent[cell] = parent[parent[cell]]
                cell = parent[cell]
            return cell

        for r, c in cells:
            for dr, dc in neighbours:
                other = (r + dr, c + dc)
                if other in parent:
                    parent[find((r, c))] = find(other)
        return len({find(cell) for cell in cells})

    eight = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    four = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    foreground = [(r, c) for r in range(h) for c in range(w) if mask[r, c]]
    # background with a one-pixel frame so border regions merge
    padded = np.pad(~mask, 1, constant_values=True)
    background = [(r, c) for r in range(h + 2) for c in range(w + 2) if padded[r, c]]
    return count(foreground, eight), count(background, four) - 1


def random_blob(rng, size=24, steps=40):
    mask = np.zeros((size, size), dtype=bool)
    r, c = size // 2, size // 2
    for _ in range(steps):
        mask[r, c] = True
        r = int(np.clip(r + rng.integers(-1, 2), 0, size - 1))
        c = int(np.clip(c + rng.integers(-1, 2), 0, size - 1))
    return ndimage.binary_dilation(mask, iterations=int(rng.integers(0, 3)))


class TestDice:
    def test_identical_and_disjoint(self):
        a = np.zeros((4, 4), dtype=bool)
        a[:2, :2] = True
        assert dice(a, a) == 1.0
        assert dice(a, a[::-1, ::-1]) == 0.0

    def test_shifted_block(self):
        a = np.zeros((4, 4), dtype=bool)
        a[0:2, 0:2] = True
        b = np.zeros((4, 4), dtype=bool)
        b[0:2, 1:3] = True
        assert dice(a, b) == pytest.approx(0.5)
        assert dice(a, b) == dice(b, a)

    def test_empty_masks(self):
        assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            dice(np.zeros((3, 3)), np.zeros((3, 4)))


class TestSkeleton:
    def test_thin_line_is_unchanged(self):
        line = np.zeros((5, 12), dtype=bool)
        line[2, 1:11] = True
        assert np.array_equal(skeletonize(line), line)

    def test_bar_thins_to_one_pixel_path(self):
        bar = np.zeros((9, 30), dtype=bool)
        bar[3:6, 5:25] = True
        skeleton = skeletonize(bar)
        columns = np.nonzero(skeleton.any(axis=0))[0]
        assert skeleton.sum(axis=0).max() == 1
        assert columns.min() <= 6 and columns.max() >= 23
        assert betti_numbers(skeleton)[0] == 1

    def test_components_and_footprint_are_kept(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            blob = random_blob(rng)
            skeleton = skeletonize(blob)
            assert not np.any(skeleton & ~blob)
            assert betti_numbers(skeleton)[0] == betti_numbers(blob)[0]

    def test_empty_mask(self):
        assert not skeletonize(np.zeros((4, 4))).any()


class TestClDice:
    def test_identical_tube(self):
        tube = np.zeros((10, 40), dtype=bool)
        tube[4:7, 2:38] = True
        assert cldice(tube, tube) == pytest.approx(1.0)

    def test_empty_prediction_is_undefined(self):
        tube = np.zeros((10, 40), dtype=bool)
        tube[4:7, 2:38] = True
        assert cldice(np.zeros_like(tube), tube) is None

    def test_gap_by_hand_count(self):
        gt = np.zeros((10, 40), dtype=bool)
        gt[4:7, 2:38] = True
        pred = gt.copy()
        pred[:, 20:23] = False
        skel_gt = skeletonize(gt)
        # the centre line crosses the three removed columns once each
        assert skel_gt[:, 20:23].sum() == 3
        t_sens = (skel_gt.sum() - 3) / skel_gt.sum()
        t_prec = 1.0
        assert cldice(pred, gt) == pytest.approx(2 * t_prec * t_sens / (t_prec + t_sens), abs=1e-12)


class TestBetti:
    def test_disk_and_rings(self):
        assert betti_numbers(disk(21, (10, 10), 6)) == (1, 0)
        assert betti_numbers(ring(21, (10, 10), 8, 4)) == (1, 1)
        two = np.zeros((21, 42), dtype=bool)
        two[:, :21] = ring(21, (10, 10), 8, 4)
        two[:, 21:] = ring(21, (10, 10), 8, 4)
        assert betti_numbers(two) == (2, 2)

    def test_matches_union_find(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            mask = rng.uniform(size=(10, 10)) < rng.uniform(0.2, 0.7)
            assert betti_numbers(mask) == union_find_betti(mask)

    def test_invariant_under_translation_and_rotation(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[2:10, 3:12] = ring(21, (10, 10), 4, 2)[6:14, 5:14]
        expected = betti_numbers(mask)
        assert betti_numbers(np.roll(mask, (5, 4), axis=(0, 1))) == expected
        assert betti_numbers(np.rot90(mask)) == expected

    def test_errors(self):
        gt = np.zeros((5, 20), dtype=bool)
        gt[2, 1:19] = True
        pred = gt.copy()
        pred[2, [6, 12]] = False
        assert betti_error(gt, gt) == 0
        assert betti_error(pred, gt) == 2
        (p0, p1), (g0, g1) = betti_numbers(pred), betti_numbers(gt)
        assert betti_error(pred, gt) == abs(p0 - g0) + abs(p1 - g1)

    def test_patch_average(self):
        gt = np.zeros((8, 8), dtype=bool)
        gt[1, 1] = True
        assert betti_error(np.zeros_like(gt), gt, patch=4) == pytest.approx(0.25)
        with pytest.raises(InvalidArgumentError):
            betti_error(gt, gt, patch=0)
        assert "whole-image" in betti_convention()
        assert "4x4" in betti_convention(4)


class TestResize:
    def test_constant_masks(self):
        assert not resize_label(np.zeros((10, 10)), 7, 13).any()
        assert resize_label(np.ones((10, 10)), 7, 13).all()

    def test_area_average(self):
        values = np.arange(16.0).reshape(4, 4)
        assert np.allclose(resize_area(values, 2, 2), [[2.5, 4.5], [10.5, 12.5]])

    def test_staircase_stays_connected(self):
        line = np.zeros((16, 32), dtype=bool)
        for c in range(32):
            line[c // 2, c] = True
        assert betti_numbers(line)[0] == 1
        assert betti_numbers(resize_label(line, 8, 16))[0] == 1
        assert betti_numbers(resize_nearest(line, 8, 16))[0] > 1

    def test_same_size_keeps_components(self):
        for _, label in generate(domain_preset("source", 32), 5, seed=2, levels=2):
            assert betti_numbers(resize_label(label, 32, 32))[0] == betti_numbers(label)[0]

    def test_invalid_size(self):
        with pytest.raises(InvalidArgumentError):
            resize_label(np.zeros((4, 4)), 0, 4)


class TestReports:
    def test_evaluate_and_aggregate(self):
        gt = np.zeros((10, 40), dtype=bool)
        gt[4:7, 2:38] = True
        reports = [evaluate(gt * 0.9, gt, name="same"), evaluate(np.zeros(gt.shape), gt, name="empty")]
        assert reports[0].dice == 1.0 and reports[0].betti_error == 0
        assert not reports[1].cldice_defined
        summary = aggregate(reports)
        assert summary["count"] == 2
        assert summary["cldice_undefined"] == 1
        assert summary["mean_cldice"] == pytest.approx(1.0)
        assert summary["mean_dice"] == pytest.approx(0.5)
        assert reports[0].to_dict()["betti_gt"] == [1, 0]

    def test_aggregate_of_nothing(self):
        summary = aggregate([])
        assert summary["count"] == 0
        assert summary["mean_dice"] is None

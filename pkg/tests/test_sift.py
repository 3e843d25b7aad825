import io
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose

from copydet.errors import BadMagic, CorruptStream, DegenerateImage, ParamOutOfRange
from copydet.imaging import GrayImage, flip_horizontal, resize_min_edge, rotate, to_grayscale
from copydet.matcher import pairwise_match_count
from copydet.sift import (FeatureSet, SiftParams, _orientation_histogram, build_scale_space, detect_keypoints,
                          extract, load_feature_archive, n_octaves_for, normalize_descriptors, orientation_peaks,
                          quantize_descriptors, read_feature_set, save_feature_archive, write_feature_set)

from conftest import procedural


def gray(seed, size=300):
    return to_grayscale(procedural(seed, size, size))


def blob_image(cx=150.0, cy=150.0, sigma=4.0, size=300):
    yy, xx = np.mgrid[0:size, 0:size]
    px = 0.1 + 0.8 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
    return GrayImage(px.astype(np.float32))


class TestParams:
    @pytest.mark.parametrize("kw", [{"scales_per_octave": 1}, {"contrast_threshold": 0}, {"max_keypoints": 0},
                                    {"edge_ratio": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ParamOutOfRange):
            SiftParams(**kw)

    def test_dog_threshold_scaled(self):
        assert SiftParams().dog_threshold == pytest.approx(0.01)


class TestScaleSpace:
    def test_octave_count(self):
        assert n_octaves_for(300) == 6
        assert build_scale_space(GrayImage(np.zeros((300, 420), np.float32))).n_octaves == 6

    def test_levels_per_octave(self):
        space = build_scale_space(gray(1, 64))
        for g, d in zip(space.gaussians, space.dogs):
            assert g.shape[0] == 6 and d.shape[0] == 5
            assert g.shape[1:] == d.shape[1:]

    def test_octave_halving(self):
        space = build_scale_space(GrayImage(np.zeros((128, 200), np.float32)))
        assert [g.shape[1:] for g in space.gaussians] == [(128, 200), (64, 100), (32, 50), (16, 25), (8, 13)]

    def test_effective_sigma(self):
        # impulse response std of level k (plus the assumed 0.5 camera blur) is base_sigma * 2^(k/s)
        px = np.zeros((129, 129), np.float32)
        px[64, 64] = 1.0
        space = build_scale_space(GrayImage(px))
        yy, xx = np.mgrid[0:129, 0:129]
        for k, level in enumerate(space.gaussians[0]):
            w = level / level.sum()
            var = float((w * (xx - 64) ** 2).sum())
            expected = 1.6 * 2 ** (k / 3)
            assert math.sqrt(var + 0.25) == pytest.approx(expected, rel=0.02)

    def test_constant_dog_zero(self):
        space = build_scale_space(GrayImage(np.full((64, 64), 0.37, np.float32)))
        assert all(np.all(d == 0) for d in space.dogs)

    def test_degenerate(self):
        with pytest.raises(DegenerateImage):
            build_scale_space(GrayImage(np.zeros((15, 100), np.float32)))


class TestDetection:
    def test_constant_has_no_keypoints(self):
        img = GrayImage(np.full((80, 80), 0.5, np.float32))
        assert len(detect_keypoints(build_scale_space(img))) == 0
        assert len(extract(img)) == 0

    def test_blob_location_matches_brute_force(self):
        space = build_scale_space(blob_image())
        # oracle: global |DoG| maximum over the whole pyramid, mapped back to input pixels
        best, where = -1.0, None
        for o, dog in enumerate(space.dogs):
            inner = np.abs(dog[1:-1])
            idx = np.unravel_index(np.argmax(inner), inner.shape)
            if inner[idx] > best:
                best, where = inner[idx], (idx[2] * 2 ** o, idx[1] * 2 ** o)
        assert math.hypot(where[0] - 150, where[1] - 150) <= 3
        kps = detect_keypoints(space)
        dist = np.hypot(kps.rows[:, 0] - 150, kps.rows[:, 1] - 150)
        assert len(kps) >= 1 and dist.min() <= 3

    def test_step_edge_rejected(self):
        px = np.full((300, 300), 0.2, np.float32)
        px[:, 150:] = 0.8
        img = GrayImage(px)
        space = build_scale_space(img)
        # oracle: principal-curvature ratio along the edge, brute force on the first DoG octave
        dog = space.dogs[0][1].astype(np.float64)
        r_lim = (10 + 1) ** 2 / 10
        for c in (148, 149, 150, 151):
            for r in (100, 150, 200):
                dxx = dog[r, c + 1] + dog[r, c - 1] - 2 * dog[r, c]
                dyy = dog[r + 1, c] + dog[r - 1, c] - 2 * dog[r, c]
                dxy = (dog[r + 1, c + 1] - dog[r + 1, c - 1] - dog[r - 1, c + 1] + dog[r - 1, c - 1]) / 4
                det = dxx * dyy - dxy ** 2
                assert det <= 0 or (dxx + dyy) ** 2 / det >= r_lim
        kps = detect_keypoints(space).rows
        interior = (np.abs(kps[:, 0] - 150) < 10) & (kps[:, 1] > 30) & (kps[:, 1] < 270)
        assert not interior.any()

    def test_cap_and_sort(self):
        fs = extract(gray(3), SiftParams(max_keypoints=40))
        assert len(fs) == 40
        assert np.all(np.diff(fs.keypoints[:, 4]) <= 0)

    def test_keypoints_inside_and_positive_scale(self):
        fs = extract(gray(4))
        assert 1 <= len(fs) <= 600
        assert np.all(fs.keypoints[:, 2] > 0)
        assert np.all((fs.keypoints[:, 0] >= 0) & (fs.keypoints[:, 0] < 300))
        assert np.all((fs.keypoints[:, 3] >= 0) & (fs.keypoints[:, 3] < 2 * math.pi))


class TestOrientation:
    @pytest.mark.parametrize("theta_deg", [0, 35, 130, 250, 300])
    def test_ramp_direction(self, theta_deg):
        t = math.radians(theta_deg)
        yy, xx = np.mgrid[0:81, 0:81].astype(np.float32)
        img = (0.5 + 0.004 * ((xx - 40) * math.cos(t) + (yy - 40) * math.sin(t))).astype(np.float32)
        peaks = orientation_peaks(_orientation_histogram(img, 40.0, 40.0, 3.0))
        assert len(peaks) == 1
        diff = (peaks[0] - t + math.pi) % (2 * math.pi) - math.pi
        assert abs(diff) <= math.radians(10)

    def test_equal_peaks_duplicate(self):
        hist = np.zeros(36)
        hist[[4, 13]] = 1.0
        angles = orientation_peaks(hist)
        assert_allclose(sorted(angles), [math.radians(40), math.radians(130)], atol=1e-9)

    def test_secondary_peak_threshold(self):
        hist = np.zeros(36)
        hist[4], hist[20] = 1.0, 0.79
        assert len(orientation_peaks(hist)) == 1
        hist[20] = 0.8
        assert len(orientation_peaks(hist)) == 2

    def test_rotation_by_90(self):
        img = gray(5)
        rot = GrayImage(np.ascontiguousarray(np.rot90(img.pixels)))  # (x, y) -> (y, W-1-x)
        a, b = extract(img), extract(rot)
        diffs = []
        for x, y, s, ori, _ in a.keypoints:
            xr, yr = y, 299 - x
            d = np.hypot(b.keypoints[:, 0] - xr, b.keypoints[:, 1] - yr)
            cand = np.nonzero((d < 1.0) & (np.abs(b.keypoints[:, 2] / s - 1) < 0.1))[0]
            if len(cand):
                delta = (b.keypoints[cand, 3] - (ori - math.pi / 2) + math.pi) % (2 * math.pi) - math.pi
                diffs.append(np.abs(delta).min())
        assert len(diffs) >= 50
        assert np.mean(np.array(diffs) <= math.radians(10)) >= 0.8


class TestDescriptors:
    def test_shape_and_range(self):
        fs = extract(gray(6))
        assert fs.descriptors.shape == (len(fs), 128) and fs.descriptors.dtype == np.uint8

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 128), elements=st.floats(0, 1e3)))
    def test_normalize_unit(self, raw):
        unit = normalize_descriptors(raw, 0.2)
        norms = np.linalg.norm(unit, axis=1)
        nonzero = np.linalg.norm(raw, axis=1) > 0
        assert_allclose(norms[nonzero], 1.0, atol=1e-6)
        q = quantize_descriptors(unit)
        assert q.dtype == np.uint8 and q.shape == (3, 128)

    def test_clip_applied(self):
        raw = np.zeros((1, 128))
        raw[0, 0], raw[0, 1:] = 10.0, 0.1
        n = math.sqrt(100 + 127 * 0.01)
        small = 0.1 / n  # the spike (10 / n > 0.2) is clipped to 0.2
        renorm = math.sqrt(0.04 + 127 * small ** 2)
        unit = normalize_descriptors(raw, 0.2)
        assert unit[0, 0] == pytest.approx(0.2 / renorm)
        assert_allclose(unit[0, 1:], small / renorm)

    def test_rotation_30_descriptor_distance(self):
        img = procedural(7, 300, 300)
        a = extract(to_grayscale(img))
        b = extract(to_grayscale(rotate(img, 30)))
        t = math.radians(30)
        c = 149.5
        da = a.descriptors.astype(np.float64)
        sq = (da ** 2).sum(1)
        inter = np.sqrt(np.maximum(sq[:, None] + sq[None] - 2 * da @ da.T, 0))
        median_inter = np.median(inter[np.triu_indices(len(da), 1)])
        pair_d = []
        for i, (x, y, s, ori, _) in enumerate(a.keypoints):
            # a counter-clockwise turn moves (x, y) to centre + R(-t) in y-down coordinates
            xr = c + math.cos(t) * (x - c) + math.sin(t) * (y - c)
            yr = c - math.sin(t) * (x - c) + math.cos(t) * (y - c)
            d = np.hypot(b.keypoints[:, 0] - xr, b.keypoints[:, 1] - yr)
            cand = np.nonzero((d < 1.5) & (np.abs(b.keypoints[:, 2] / s - 1) < 0.15))[0]
            if len(cand):
                pair_d.append(np.linalg.norm(b.descriptors[cand].astype(float) - da[i], axis=1).min())
        assert len(pair_d) >= 30
        assert np.mean(np.array(pair_d) < median_inter) >= 0.8


class TestExtract:
    def test_deterministic(self):
        img = gray(8)
        assert extract(img, image_id="a") == extract(img, image_id="a")

    def test_invariance_rates_small_fixture(self):
        rot, scale, flip = [], [], []
        for seed in range(3):
            img = procedural(seed, 320, 320)
            f0 = extract(to_grayscale(img))
            fr = extract(to_grayscale(rotate(img, 30)))
            g = to_grayscale(img)
            fs = extract(resize_min_edge(g, 160))
            ff = extract(flip_horizontal(g))
            rot.append(pairwise_match_count(fr, f0) / len(fr))
            scale.append(pairwise_match_count(fs, f0) / len(fs))
            flip.append(pairwise_match_count(ff, f0) / len(ff))
        assert np.mean(rot) >= 0.3 and np.mean(scale) >= 0.25
        assert np.mean(flip) < np.mean(rot)


class TestFeatureFile:
    def test_roundtrip(self, tmp_path):
        sets = [extract(gray(9, 64), image_id="ä/one"), FeatureSet("empty")]
        save_feature_archive(tmp_path / "f.sft", sets)
        assert load_feature_archive(tmp_path / "f.sft") == sets

    def test_layout(self):
        fs = FeatureSet("ab", np.arange(5, dtype=np.float32)[None], np.full((1, 128), 7, np.uint8))
        buf = io.BytesIO()
        write_feature_set(buf, fs)
        data = buf.getvalue()
        assert data[:4] == b"SFT1"
        assert struct.unpack("<I", data[4:8]) == (2,) and data[8:10] == b"ab"
        assert struct.unpack("<I", data[10:14]) == (1,)
        assert struct.unpack("<5f", data[14:34]) == (0.0, 1.0, 2.0, 3.0, 4.0)
        assert data[34:] == bytes([7] * 128)

    def test_bad_magic(self):
        with pytest.raises(BadMagic):
            read_feature_set(io.BytesIO(b"XXXX\x00\x00\x00\x00"))

    def test_truncated(self):
        buf = io.BytesIO()
        write_feature_set(buf, extract(gray(9, 64)))
        with pytest.raises(CorruptStream):
            read_feature_set(io.BytesIO(buf.getvalue()[:-10]))

    def test_eof(self):
        assert read_feature_set(io.BytesIO(b"")) is None

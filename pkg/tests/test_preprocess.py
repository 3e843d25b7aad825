import numpy as np
import pytest

from copydet.errors import BoxOutOfBounds, DegenerateImage, MalformedRow, NegativeDimension
from copydet.imaging import CropBox, GrayImage, ImageBuf, crop, to_grayscale
from copydet.preprocess import DetectorConfig, detect_pasted_region, load_crop_boxes, route_variants

from conftest import clean_fixture, paste_fixture, procedural


def _flat_with_square(size, box, fg=0.8, bg=0.2):
    px = np.full((size, size), bg, np.float32)
    px[box.y:box.y + box.h, box.x:box.x + box.w] = fg
    return GrayImage(px)


class TestDetector:
    def test_uniform_gray(self):
        assert detect_pasted_region(GrayImage(np.full((100, 120), 0.5, np.float32))) is None

    def test_too_small(self):
        with pytest.raises(DegenerateImage):
            detect_pasted_region(GrayImage(np.zeros((31, 100), np.float32)))

    def test_flat_square_found(self):
        box = CropBox(40, 50, 90, 70)
        found = detect_pasted_region(_flat_with_square(200, box))
        assert found is not None and found.iou(box) >= 0.9

    def test_near_full_frame_rejected(self):
        # 98% of the frame is above max_frac and too close to the border for a clutter band
        box = CropBox(1, 1, 197, 197)
        assert detect_pasted_region(_flat_with_square(200, box)) is None

    def test_area_gate(self):
        box = CropBox(20, 20, 160, 160)  # 64% of the frame
        img = _flat_with_square(200, box)
        assert detect_pasted_region(img) is not None
        assert detect_pasted_region(img, DetectorConfig(max_frac=0.5)) is None

    def test_paste_fixture_iou(self):
        hits = [b is not None and b.iou(box) >= 0.8
                for img, box in paste_fixture() for b in [detect_pasted_region(to_grayscale(img))]]
        assert np.mean(hits) >= 0.8

    def test_false_positive_rate(self):
        fired = [detect_pasted_region(to_grayscale(img)) is not None for img in clean_fixture()]
        assert np.mean(fired) < 0.2

    def test_deterministic(self):
        img = to_grayscale(paste_fixture()[0][0])
        assert detect_pasted_region(img) == detect_pasted_region(img)


class TestCropBoxes:
    def test_parse(self, tmp_path):
        p = tmp_path / "b.csv"
        p.write_text("image_id,x,y,w,h\nq1,10,20,30,40\n")
        assert load_crop_boxes(p) == {"q1": CropBox(10, 20, 30, 40)}

    def test_empty_file(self, tmp_path):
        p = tmp_path / "b.csv"
        p.write_text("")
        assert load_crop_boxes(p) == {}

    def test_zero_width(self, tmp_path):
        p = tmp_path / "b.csv"
        p.write_text("image_id,x,y,w,h\nq1,10,20,0,40\n")
        with pytest.raises(NegativeDimension):
            load_crop_boxes(p)

    def test_later_rows_override(self, tmp_path):
        p = tmp_path / "b.csv"
        p.write_text("image_id,x,y,w,h\nq1,1,1,1,1\nq1,2,2,2,2\n")
        assert load_crop_boxes(p)["q1"] == CropBox(2, 2, 2, 2)

    @pytest.mark.parametrize("body", ["id,x\nq,1\n", "image_id,x,y,w,h\nq1,a,2,3,4\n", "image_id,x,y,w,h\nq1,1,2\n"])
    def test_malformed(self, tmp_path, body):
        p = tmp_path / "b.csv"
        p.write_text(body)
        with pytest.raises(MalformedRow):
            load_crop_boxes(p)


class TestRouting:
    def setup_method(self):
        self.img = procedural(11, 100, 80)

    def test_no_detection(self):
        r = route_variants(self.img, None)
        assert r.global_input is self.img and r.local_inputs == (self.img,) and not r.detected

    def test_detection(self):
        box = CropBox(10, 10, 50, 40)
        r = route_variants(self.img, box)
        piece = crop(self.img, box)
        assert r.global_input == piece
        assert len(r.local_inputs) == 2 and r.local_inputs[0] is self.img and r.local_inputs[1] == piece

    def test_full_frame_is_no_detection(self):
        r = route_variants(self.img, CropBox(0, 0, 100, 80))
        assert r.global_input is self.img and r.local_inputs == (self.img,) and r.box is None

    def test_out_of_bounds(self):
        with pytest.raises(BoxOutOfBounds):
            route_variants(self.img, CropBox(90, 0, 20, 10))

    def test_never_empty(self):
        for det in (None, CropBox(0, 0, 5, 5), CropBox(0, 0, 100, 80)):
            r = route_variants(self.img, det)
            assert len(r.local_inputs) >= 1 and isinstance(r.global_input, ImageBuf)

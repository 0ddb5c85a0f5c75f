import numpy as np
import pytest
from PIL import Image

from unimask.core import rle_encode
from unimask.errors import ShapeMismatch
from unimask.postprocess import Instance, InstanceOutput, PanopticOutput, Segment, SemanticOutput
from unimask.render import category_color, features_from_png, instance_colors, overlay_array, render_overlay


def _rect(y0, y1, x0, x1, size=8):
    m = np.zeros((size, size), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def test_empty_panoptic_is_all_black(tmp_path):
    out = PanopticOutput(np.zeros((8, 8), dtype=np.int64), ())
    path = render_overlay(np.ones((8, 8, 3)), out, tmp_path / "a.png")
    arr = np.asarray(Image.open(path))
    assert arr.shape == (32, 32, 3) and not arr.any()


def test_rendering_is_byte_identical(tmp_path):
    inst = InstanceOutput((Instance(1, 0.9, rle_encode(_rect(0, 4, 0, 4))), Instance(2, 0.3, rle_encode(_rect(3, 8, 3, 8)))))
    rgb = np.random.default_rng(0).random((8, 8, 3))
    a = render_overlay(rgb, inst, tmp_path / "a.png")
    b = render_overlay(rgb, inst, tmp_path / "b.png")
    assert a.read_bytes() == b.read_bytes()


def test_same_class_instances_get_distinct_colours():
    m1, m2 = _rect(0, 3, 0, 3), _rect(5, 8, 5, 8)
    inst = InstanceOutput((Instance(1, 0.9, rle_encode(m1)), Instance(1, 0.8, rle_encode(m2))))
    arr = overlay_array(np.full((8, 8, 3), 0.5), inst)
    assert not np.array_equal(arr[1, 1], arr[6, 6])
    colours = instance_colors([1, 1, 1, 2, 2])
    assert len({tuple(c) for c in colours}) == 5


def test_void_and_unlabelled_pixels_are_black():
    label = np.array([[1, -1], [2, 2]])
    arr = overlay_array(None, SemanticOutput(label))
    assert not arr[0, 1].any() and arr[0, 0].any()
    inst = InstanceOutput((Instance(1, 0.5, rle_encode(_rect(0, 2, 0, 2))),))
    arr = overlay_array(None, inst)
    assert not arr[5, 5].any() and arr[0, 0].any()


def test_palette_is_stable_per_category():
    np.testing.assert_array_equal(category_color(3), category_color(3))
    assert not np.array_equal(category_color(3), category_color(4))


def test_feature_maps_are_accepted_as_base():
    seg = np.where(_rect(0, 4, 0, 8), 1, 0)
    out = PanopticOutput(seg, (Segment(1, 5, False, 32),))
    arr = overlay_array(np.random.default_rng(1).normal(size=(8, 8, 17)), out)
    assert arr.shape == (8, 8, 3) and arr[:4].any() and not arr[4:].any()


def test_empty_instance_output_needs_a_size():
    with pytest.raises(ShapeMismatch):
        overlay_array(None, InstanceOutput(()))
    assert not overlay_array(np.zeros((3, 4, 3)), InstanceOutput(())).any()


def test_png_features_adapter(tmp_path):
    rgb = (np.random.default_rng(2).random((40, 40, 3)) * 255).astype(np.uint8)
    Image.fromarray(rgb).save(tmp_path / "in.png")
    feats = features_from_png(tmp_path / "in.png", size=16)
    assert feats.shape[:2] == (16, 16) and np.isfinite(feats).all()

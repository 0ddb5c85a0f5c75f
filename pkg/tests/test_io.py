import json
import struct

import numpy as np
import pytest

from unimask import io
from unimask.cotrain import ToyHead, default_specs, make_scene
from unimask.cotrain.synth import FEATURE_DIM
from unimask.core import DatasetSpec, ProposalSet, SegmentGT, pseudo_embeddings, rle_encode
from unimask.errors import ParseError, ValidationError
from unimask.postprocess import Instance, InstanceOutput, PanopticOutput, SemanticOutput

SPEC = DatasetSpec("toy", (1,), (2,), {1: "disc", 2: "sky"}, "panoptic")


def minimal_manifest():
    m = np.zeros((4, 5), dtype=bool)
    m[1:3, 1:4] = True
    return {
        "version": 1,
        "datasets": [SPEC.to_json()],
        "images": [{"id": 1, "height": 4, "width": 5, "feature_file": "f1.npy"}],
        "annotations": [
            {"id": 7, "image_id": 1, "category_id": 1, "segmentation": rle_encode(m).to_json(), "box": [1, 1, 4, 3]}
        ],
    }


def problems_of(obj):
    with pytest.raises(ValidationError) as info:
        io.manifest_from_json(obj)
    return info.value.problems


# -- canonical JSON ---------------------------------------------------------------------


def test_canonical_json_formatting():
    text = io.canonical_dumps({"b": 1 / 3, "a": [np.float64(-0.0), np.int64(2), True]})
    assert text == '{\n "a": [\n  0.0,\n  2,\n  true\n ],\n "b": 0.333333333\n}\n'


def test_canonical_json_rejects_non_finite():
    with pytest.raises(ValueError):
        io.canonical_dumps({"x": float("nan")})


def test_read_json_errors(tmp_path):
    with pytest.raises(ParseError):
        io.read_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"a": 1,\n  oops}')
    with pytest.raises(ParseError, match="line 2"):
        io.read_json(bad)


# -- manifests ----------------------------------------------------------------------------


def test_minimal_manifest_loads(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps(minimal_manifest()))
    man = io.load_manifest(path)
    assert [im.id for im in man.images] == [1]
    assert man.spec_for(1) == SPEC
    (g,) = man.gts_for(1)
    assert g.category_id == 1 and g.box == (1, 1, 4, 3) and g.mask.area == 6
    assert man.base_dir == tmp_path


def test_rle_sum_error_names_the_annotation():
    obj = minimal_manifest()
    counts = obj["annotations"][0]["segmentation"]["counts"]
    counts[-1] -= 1
    (problem,) = problems_of(obj)
    assert "annotation 7" in problem and "19" in problem and "4x5=20" in problem


def test_unknown_category_is_named():
    obj = minimal_manifest()
    obj["annotations"][0]["category_id"] = 99
    (problem,) = problems_of(obj)
    assert "unknown category id 99" in problem and "annotation 7" in problem


def test_all_problems_are_reported_together():
    obj = minimal_manifest()
    obj["annotations"][0]["category_id"] = 99
    obj["annotations"].append({"id": 8, "image_id": 5, "category_id": 1, "box": [0, 0, 1, 1]})
    obj["annotations"].append({"id": 9, "image_id": 1, "category_id": 2, "box": [0, 0, 9, 1]})
    obj["images"].append({"id": 2, "height": 4, "width": 5})
    problems = problems_of(obj)
    assert len(problems) == 4
    text = "\n".join(problems)
    for needle in ("99", "image_id 5 does not resolve", "annotation 9", "image 2"):
        assert needle in text


def test_box_must_contain_mask():
    obj = minimal_manifest()
    obj["annotations"][0]["box"] = [1, 1, 3, 3]
    (problem,) = problems_of(obj)
    assert "annotation 7" in problem


def test_mask_size_must_match_image():
    obj = minimal_manifest()
    obj["annotations"][0]["segmentation"] = rle_encode(np.ones((5, 4), dtype=bool)).to_json()
    del obj["annotations"][0]["box"]
    (problem,) = problems_of(obj)
    assert "mask size 5x4" in problem


def test_version_and_dataset_checks():
    obj = minimal_manifest()
    obj["version"] = 3
    obj["datasets"] = obj["datasets"] * 2
    problems = problems_of(obj)
    assert any("version" in p for p in problems)
    assert any("more than once" in p for p in problems)
    with pytest.raises(ValidationError):
        io.manifest_from_json([1, 2])


def test_manifest_save_load_save_is_byte_stable(tmp_path):
    man = io.manifest_from_json(minimal_manifest(), tmp_path)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    io.save_manifest(man, a)
    io.save_manifest(io.load_manifest(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_prediction_scores_round_trip(tmp_path):
    obj = minimal_manifest()
    obj["annotations"][0]["score"] = 0.123456789123
    path = tmp_path / "p.json"
    io.write_json(obj, path)
    (ann,) = io.load_manifest(path).annotations
    assert ann.score == 0.123456789


def test_image_features_from_file_and_generator(tmp_path):
    feats = np.random.default_rng(0).normal(size=(4, 5, 3))
    np.save(tmp_path / "f1.npy", feats)
    man = io.manifest_from_json(minimal_manifest(), tmp_path)
    np.testing.assert_array_equal(io.image_features(man, 1), feats)
    assert io.image_rgb(man, 1) is None

    spec = default_specs()["box_shapes"]
    gen = {"kind": "box_shapes", "seed": 3, "index": 2, "size": 32}
    obj = {"version": 1, "datasets": [spec.to_json()], "images": [{"id": 4, "height": 32, "width": 32, "generator": gen}]}
    man = io.manifest_from_json(obj)
    scene = make_scene("box_shapes", 3, 2, 32)
    np.testing.assert_array_equal(io.image_features(man, 4), scene.image_features)
    np.testing.assert_array_equal(io.image_rgb(man, 4), scene.rgb)


# -- proposals and outputs -----------------------------------------------------------------


def test_proposals_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    p = ProposalSet(rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 3)))
    io.save_proposals([(1, p)], tmp_path / "p.json")
    ((image_id, q),) = io.load_proposals(tmp_path / "p.json")
    assert image_id == 1
    np.testing.assert_allclose(q.mask_logits, p.mask_logits, rtol=1e-8)
    np.testing.assert_allclose(q.class_logits, p.class_logits, rtol=1e-8)


def test_malformed_proposals():
    with pytest.raises(ValidationError):
        io.proposals_from_json({"proposals": [{"image_id": 1}]})


def test_panoptic_output_round_trips_through_annotations():
    a = np.zeros((4, 5), dtype=bool)
    a[:2] = True
    out = PanopticOutput.from_masks([a, ~a], [1, 2], [True, False], [0.9, 0.8])
    anns = io.output_annotations(3, out)
    assert [x.id for x in anns] == [1, 2] and [x.score for x in anns] == [0.9, 0.8]
    back = io.panoptic_from_annotations(anns, SPEC, 4, 5)
    np.testing.assert_array_equal(back.segment_map, out.segment_map)
    assert back.segments == out.segments


def test_semantic_and_instance_outputs_round_trip():
    label = np.array([[1, 1, -1], [2, 2, 2]])
    anns = io.output_annotations(1, SemanticOutput(label))
    np.testing.assert_array_equal(io.semantic_from_annotations(anns, 2, 3).label_map, label)
    inst = InstanceOutput((Instance(1, 0.7, rle_encode(label == 1)), Instance(2, 0.4, rle_encode(label == 2))))
    assert io.instances_from_annotations(io.output_annotations(1, inst)) == inst
    with pytest.raises(TypeError):
        io.output_annotations(1, object())


# -- configs and checkpoints -----------------------------------------------------------------


def test_config_round_trip(tmp_path):
    from unimask.cotrain import standard_config

    cfg = standard_config(steps=3, learning_rate=0.02)
    io.save_config(cfg, tmp_path / "c.json")
    assert io.load_config(tmp_path / "c.json") == cfg


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parent.parent / "configs"
    for name in ("standard.json", "quick.json"):
        io.load_config(root / name)


def test_bad_config(tmp_path):
    (tmp_path / "c.json").write_text('{"datasets": [], "steps": 1}')
    with pytest.raises(ValidationError):
        io.load_config(tmp_path / "c.json")


def test_checkpoint_round_trip_is_exact(tmp_path):
    head = ToyHead.init(4, 3, FEATURE_DIM, 6, seed=2)
    head = ToyHead(head.queries, head.mask_map, head.class_map, np.arange(6.0))
    # the background row is stored once, as a head parameter
    table = pseudo_embeddings(["b", "a", "c"], 6, 0).with_background(head.background)
    io.save_checkpoint(head, table, tmp_path / "ck.bin")
    head2, table2 = io.load_checkpoint(tmp_path / "ck.bin")
    assert head2.to_vector().tobytes() == head.to_vector().tobytes()
    assert table2.matrix(["a", "b", "c"]).tobytes() == table.matrix(["a", "b", "c"]).tobytes()
    io.save_checkpoint(head2, table2, tmp_path / "again.bin")
    assert (tmp_path / "ck.bin").read_bytes() == (tmp_path / "again.bin").read_bytes()


def test_checkpoint_layout(tmp_path):
    head = ToyHead.init(2, 3, FEATURE_DIM, 4, seed=0)
    io.save_checkpoint(head, pseudo_embeddings(["x"], 4, 0), tmp_path / "ck.bin")
    data = (tmp_path / "ck.bin").read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8 : 8 + n])
    assert header["format"] == "unimask-checkpoint" and header["embedding_names"] == ["x"]
    assert [a["name"] for a in header["arrays"]] == ["queries", "mask_map", "class_map", "background", "embeddings"]
    floats = sum(int(np.prod(a["shape"])) for a in header["arrays"])
    assert len(data) == 8 + n + 8 * floats
    first = struct.unpack("<d", data[8 + n : 16 + n])[0]
    assert first == head.queries[0, 0]


def test_corrupt_checkpoints(tmp_path):
    path = tmp_path / "ck.bin"
    path.write_bytes(b"abc")
    with pytest.raises(ParseError):
        io.load_checkpoint(path)
    head = ToyHead.init(2, 3, FEATURE_DIM, 4, seed=0)
    io.save_checkpoint(head, pseudo_embeddings(["x"], 4, 0), path)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ParseError):
        io.load_checkpoint(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(ParseError):
        io.load_checkpoint(path)


def test_segment_with_ignore_flag_survives(tmp_path):
    obj = minimal_manifest()
    obj["annotations"][0]["ignore"] = True
    man = io.manifest_from_json(obj)
    assert man.gts_for(1)[0].ignore
    assert man.to_json()["annotations"][0]["ignore"] is True
    assert SegmentGT.from_mask(1, np.ones((2, 2))).ignore is False

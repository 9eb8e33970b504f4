import json
import logging

import numpy as np
import pytest

from mavlkit.data_io import (CaptionGroup, Dataset, ImageInfo, SchemaError, SyntheticSpec, ValidationError,
                             ablation_setting1_merge, ablation_setting2_nms, ablation_setting3_group,
                             dataset_from_dict, dataset_to_dict, detections_from_list, gen_synthetic_dataset,
                             load_ground_truth, load_proposals, load_synthetic, rule_matches, save_detections,
                             size_class, write_synthetic)
from mavlkit.geometry import Box, Detection, GroundTruthBox, iou
from mavlkit.mask2box import mask_to_boxes


def _doc(anns=(), images=({"id": 1, "width": 100, "height": 80},)):
    return {"images": list(images), "annotations": list(anns), "categories": [{"id": 1, "name": "thing"}]}


def test_bbox_conversion_and_clamp():
    ds = dataset_from_dict(_doc([{"id": 1, "image_id": 1, "bbox": [10, 20, 30, 40], "category_id": 1},
                                 {"id": 2, "image_id": 1, "bbox": [90, 70, 30, 30]}]))
    assert ds.annotations[0].box == Box(10, 20, 40, 60)
    assert ds.annotations[1].box == Box(90, 70, 100, 80)
    assert dataset_from_dict(_doc()).annotations == []


def test_validation_errors():
    with pytest.raises(ValidationError):
        dataset_from_dict(_doc([{"id": 1, "image_id": 1, "bbox": [0, 0, 1, 1]},
                                {"id": 1, "image_id": 1, "bbox": [0, 0, 2, 2]}]))
    with pytest.raises(ValidationError):
        dataset_from_dict(_doc([{"id": 1, "image_id": 7, "bbox": [0, 0, 1, 1]}]))
    with pytest.raises(ValidationError):
        dataset_from_dict(_doc([{"id": 1, "image_id": 1, "bbox": [0, 0, -1, 1]}]))
    with pytest.raises(SchemaError):
        dataset_from_dict({"images": []})
    with pytest.raises(ValidationError):
        Dataset([ImageInfo(1, 2, 2), ImageInfo(1, 3, 3)])
    with pytest.raises(ValidationError):
        CaptionGroup(0, ("ALL",), np.zeros((0, 4)))


def test_crowd_annotations_dropped_with_log(caplog):
    doc = _doc([{"id": 1, "image_id": 1, "bbox": [0, 0, 5, 5], "iscrowd": 1},
                {"id": 2, "image_id": 1, "bbox": [0, 0, 5, 5]}])
    with caplog.at_level(logging.INFO, logger="mavlkit.data_io"):
        ds = dataset_from_dict(doc)
    assert len(ds.annotations) == 1
    assert "dropped 1" in caplog.text


def test_malformed_json_reports_byte_offset(tmp_path):
    p = tmp_path / "gt.json"
    p.write_bytes('{"images": ["é", }'.encode("utf-8"))
    with pytest.raises(SchemaError, match="byte 18"):
        load_ground_truth(p)


def test_ground_truth_round_trip(tmp_path):
    ds = dataset_from_dict(_doc([{"id": 5, "image_id": 1, "bbox": [1.5, 2, 3, 4], "category_id": 1}]))
    p = tmp_path / "gt.json"
    p.write_text(json.dumps(dataset_to_dict(ds)))
    again = load_ground_truth(p)
    assert again.annotations == ds.annotations and again.images == ds.images


def test_detection_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    dets = []
    for k in range(1000):
        x, y = rng.uniform(0, 500, 2)
        w, h = rng.uniform(0, 100, 2)
        dets.append(Detection(int(k % 7), Box(x, y, x + w, y + h), float(rng.uniform()),
                              "q" if k % 2 else None))
    p = tmp_path / "dets.json"
    save_detections(p, dets)
    assert load_proposals(p) == dets
    save_detections(p, [])
    assert load_proposals(p) == []


def test_detection_schema_errors():
    with pytest.raises(SchemaError, match="score"):
        detections_from_list([{"image_id": 0, "bbox": [0, 0, 1, 1]}])
    with pytest.raises(ValidationError):
        detections_from_list([{"image_id": 0, "bbox": [0, 0, 1, 1], "score": 1.5}])
    with pytest.raises(ValidationError):
        detections_from_list([{"image_id": 0, "bbox": [0, 0, 1, 1], "xyxy": [0, 0, 2, 2], "score": 0.5}])
    with pytest.raises(SchemaError):
        detections_from_list({"image_id": 0})


SPEC = SyntheticSpec(n_images=40, seed=3)


def test_synthetic_is_deterministic():
    a, b = gen_synthetic_dataset(SPEC), gen_synthetic_dataset(SPEC)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.dataset.annotations == b.dataset.annotations
    assert gen_synthetic_dataset(SyntheticSpec(n_images=40, seed=4)).images.tobytes() != a.images.tobytes()


def test_synthetic_groups_follow_rules():
    data = gen_synthetic_dataset(SPEC)
    gts = data.dataset.gt_by_image()
    for g in data.groups:
        assert len(g.query) == 1
        for b in g.boxes:
            assert rule_matches(g.query[0], Box.from_array(b), 64, 64)
        if g.query == ("ALL",):
            assert len(g.boxes) == len(gts[g.image_id])
        if g.query == ("SMALL",):
            assert all(size_class(Box.from_array(b), 64, 64) == "small" for b in g.boxes)
    assert {g.query[0] for g in data.groups} == {"ALL", "SMALL", "LARGE"}


def test_synthetic_boxes_are_tight_and_separated():
    data = gen_synthetic_dataset(SPEC)
    gts = data.dataset.gt_by_image()
    for i, mask in enumerate(data.masks):
        found = sorted(d.box.as_tuple() for d in mask_to_boxes(mask))
        assert found == sorted(g.box.as_tuple() for g in gts[i])


def test_synthetic_spec_errors():
    with pytest.raises(ValueError):
        SyntheticSpec(min_shapes=0)
    with pytest.raises(ValueError):
        SyntheticSpec(small_side=(6, 20))
    with pytest.raises(ValueError):
        SyntheticSpec(rules=("TINY",))


def test_write_and_load_synthetic(tmp_path):
    data = gen_synthetic_dataset(SyntheticSpec(n_images=5, seed=1))
    manifest = write_synthetic(data, tmp_path, SyntheticSpec(n_images=5, seed=1))
    again = load_synthetic(manifest)
    assert np.array_equal(again.images, data.images)
    assert again.dataset.annotations == data.dataset.annotations
    assert [(g.query, g.boxes.tolist()) for g in again.groups] == [(g.query, g.boxes.tolist()) for g in data.groups]
    tr, te = data.split(3)
    assert len(tr.images) == 3 and len(te.dataset.images) == 2


def _group(k, n, image_id=0):
    return CaptionGroup(image_id, ("ALL",), [[10 * j, 0, 10 * j + 5, 5] for j in range(k, k + n)])


def test_setting1_merge():
    g = _group(0, 2)
    assert np.array_equal(ablation_setting1_merge([g])[0], g.boxes)
    merged = ablation_setting1_merge([_group(0, 2), _group(1, 2)])
    assert len(merged[0]) == 4
    assert len(ablation_setting1_merge([_group(0, 2), _group(2, 3), _group(5, 4)])[0]) == 9


def test_setting2_nms():
    merged = ablation_setting1_merge([_group(0, 2), _group(1, 2)])
    assert len(ablation_setting2_nms(merged)[0]) == 3
    a = [0.0, 0.0, 100.0, 100.0]
    b = [0.0, 0.0, 100.0, 85.0]
    assert iou(Box(*a), Box(*b)) == pytest.approx(0.85)
    assert len(ablation_setting2_nms({0: np.array([a, b])})[0]) == 2
    assert ablation_setting2_nms({}) == {}


def test_setting3_group():
    boxes = {0: np.arange(56, dtype=float).reshape(14, 4)}
    groups = ablation_setting3_group(boxes, 6, seed=0)
    assert [len(g.boxes) for g in groups] == [6, 6, 2]
    assert all(g.query == () for g in groups)
    assert sorted(np.concatenate([g.boxes for g in groups]).tolist()) == boxes[0].tolist()
    again = ablation_setting3_group(boxes, 6, seed=0)
    assert all(np.array_equal(x.boxes, y.boxes) for x, y in zip(groups, again))
    assert len(ablation_setting3_group({0: boxes[0][:6]}, 6)) == 1
    assert len(ablation_setting3_group({0: boxes[0][:6], 1: boxes[0][:3]}, 6)) == 2


def test_gt_by_image_and_lookup():
    ds = Dataset([ImageInfo(1, 5, 5), ImageInfo(2, 5, 5)], [GroundTruthBox(2, Box(0, 0, 1, 1))])
    assert {k: len(v) for k, v in ds.gt_by_image().items()} == {1: 0, 2: 1}
    assert ds.image(2).width == 5
    with pytest.raises(KeyError):
        ds.image(3)

import json

import numpy as np
import pytest

from noisydet.data import (
    AnnotationFormatError,
    SyntheticSpec,
    image_rng,
    load_annotations,
    render_image,
    save_annotations,
    save_images,
    synthesize_dataset,
)
from noisydet.noise import NoiseSpec, inject_noise


def test_empty_dataset():
    ds = synthesize_dataset(SyntheticSpec(num_images=0))
    assert len(ds) == 0 and ds.annotations == [] and ds.pixels.shape == (0, 128, 128, 3)


def test_same_seed_same_data():
    a = synthesize_dataset(SyntheticSpec(num_images=5, seed=4))
    b = synthesize_dataset(SyntheticSpec(num_images=5, seed=4))
    np.testing.assert_array_equal(a.pixels, b.pixels)
    for x, y in zip(a.annotations, b.annotations):
        assert x.label == y.label
        np.testing.assert_array_equal(x.box, y.box)


def test_different_seed_different_data():
    a = synthesize_dataset(SyntheticSpec(num_images=3, seed=0))
    b = synthesize_dataset(SyntheticSpec(num_images=3, seed=1))
    assert not np.array_equal(a.pixels, b.pixels)


@pytest.mark.parametrize("index", range(12))
def test_boxes_bound_shape_extent_by_pixel_scan(index):
    # re-render the bare background from the same generator state; every pixel
    # that changed belongs to an object, and its extent must equal the box
    spec = SyntheticSpec(seed=3)
    img, boxes, _ = render_image(spec, image_rng(spec.seed, index))
    bare, boxes2, _ = render_image(spec, image_rng(spec.seed, index), with_objects=False)
    np.testing.assert_array_equal(boxes, boxes2)
    changed = (img != bare).any(axis=2)
    covered = np.zeros_like(changed)
    for x1, y1, x2, y2 in boxes.astype(int):
        region = changed[y1:y2, x1:x2]
        assert region[0].any() and region[-1].any() and region[:, 0].any() and region[:, -1].any()
        covered[y1:y2, x1:x2] = True
    assert not (changed & ~covered).any()


def test_boxes_do_not_overlap():
    ds = synthesize_dataset(SyntheticSpec(num_images=30, seed=2))
    for items in ds.annotations_by_image().values():
        for i, a in enumerate(items):
            for b in items[i + 1 :]:
                ix = min(a.box[2], b.box[2]) - max(a.box[0], b.box[0])
                iy = min(a.box[3], b.box[3]) - max(a.box[1], b.box[1])
                assert ix <= 0 or iy <= 0


def test_export_import_round_trip(tmp_path):
    ds = inject_noise(synthesize_dataset(SyntheticSpec(num_images=6, seed=1)), NoiseSpec(20, 20, 0))
    save_annotations(ds, tmp_path / "a.json")
    save_images(ds, tmp_path / "img")
    back = load_annotations(tmp_path / "a.json", tmp_path / "img")
    assert back.categories == ds.categories
    assert [im.id for im in back.images] == [im.id for im in ds.images]
    np.testing.assert_array_equal(back.pixels, ds.pixels)
    for x, y in zip(back.annotations, ds.annotations):
        assert (x.id, x.image_id, x.label) == (y.id, y.image_id, y.label)
        np.testing.assert_allclose(x.box, y.box, atol=1e-9)
        assert back.clean[x.id].label == ds.clean[x.id].label
        np.testing.assert_allclose(back.clean[x.id].box, ds.clean[x.id].box, atol=1e-9)


def _doc(**ann):
    rec = {"id": 7, "image_id": 0, "category_id": 1, "bbox": [1, 2, 3, 4]}
    rec.update(ann)
    return {
        "images": [{"id": 0, "file_name": "0.png", "width": 8, "height": 8}],
        "annotations": [rec],
        "categories": [{"id": 1, "name": "a"}],
    }


@pytest.mark.parametrize(
    "ann, needle",
    [
        ({"bbox": [1, 2, -3, 4]}, "id=7"),
        ({"bbox": [1, 2, 0, 4]}, "width/height"),
        ({"image_id": 5}, "unknown image_id"),
        ({"category_id": 9}, "unknown category_id"),
        ({"bbox": [1, 2]}, "four numbers"),
    ],
)
def test_malformed_annotation_names_record(tmp_path, ann, needle):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(_doc(**ann)))
    with pytest.raises(AnnotationFormatError, match=needle):
        load_annotations(path)


def test_missing_top_level_field(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"images": []}))
    with pytest.raises(AnnotationFormatError):
        load_annotations(path)

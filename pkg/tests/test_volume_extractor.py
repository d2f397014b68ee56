import json
import sys
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_array_equal

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.core.config import load_config
from src.core.errors import DataError, FormatError
from src.extractors.volume_extractor import (
    AIR_HU,
    HEADER_SIZE,
    NoduleAnnotation,
    Volume,
    VolumeExtractor,
    crop_nodule,
    decode_volume,
    encode_volume,
    hu_window,
    load_volume,
    positive_slice_indices,
    read_annotations,
    resize_slice,
    sample_negative_centers,
    save_volume,
    slice_triaxial,
    write_annotations,
)
from scripts.convert_to_swv import to_volume


@pytest.fixture
def pipeline():
    return load_config(None, {"pipeline": {"crop_size": 16}}).pipeline


def test_decode_zero_volume():
    volume = decode_volume(encode_volume(Volume("v", np.zeros((4, 4, 4)), (0.7, 0.7, 1.25))), "v")
    assert volume.shape == (4, 4, 4)
    assert volume.spacing == pytest.approx((0.7, 0.7, 1.25))
    assert volume.voxels.dtype == np.int16


def test_file_roundtrip(tmp_path):
    voxels = np.arange(2 * 3 * 5).reshape(2, 3, 5) - 1000
    path = save_volume(tmp_path / "case_01.swv", Volume("case_01", voxels))
    volume = load_volume(path)
    assert volume.id == "case_01"
    assert_array_equal(volume.voxels, voxels)


def test_bad_magic():
    blob = b"XXXX" + encode_volume(Volume("v", np.zeros((2, 2, 2))))[4:]
    with pytest.raises(FormatError) as err:
        decode_volume(blob, "v")
    assert err.value.offset == 0


def test_truncated_payload():
    blob = encode_volume(Volume("v", np.zeros((4, 4, 4))))
    with pytest.raises(FormatError) as err:
        decode_volume(blob[:-10], "v", source="v.swv")
    assert err.value.offset == len(blob) - 10


def test_dimension_overflow():
    blob = bytearray(encode_volume(Volume("v", np.zeros((1, 1, 1)))))
    blob[6:18] = np.array([4096, 4096, 4096], dtype="<u4").tobytes()
    with pytest.raises(FormatError) as err:
        decode_volume(bytes(blob), "v")
    assert err.value.offset == 6


def test_header_size():
    assert HEADER_SIZE == 30
    assert len(encode_volume(Volume("v", np.zeros((2, 2, 2))))) == 30 + 16


def test_missing_volume_file(tmp_path):
    with pytest.raises(DataError):
        load_volume(tmp_path / "nope.swv")


def test_annotations_roundtrip(tmp_path):
    annotations = [NoduleAnnotation("a", (1, 2, 3), 6.0), NoduleAnnotation("b", (4, 5, 6))]
    path = write_annotations(tmp_path / "annotations.jsonl", annotations)
    back = read_annotations(path)
    assert [(a.volume_id, a.center, a.diameter_mm) for a in back] == [("a", (1, 2, 3), 6.0), ("b", (4, 5, 6), None)]


def test_bad_annotation_line_reports_offset(tmp_path):
    first = json.dumps({"volume_id": "a", "center_zyx": [1, 2, 3]}) + "\n"
    path = tmp_path / "annotations.jsonl"
    path.write_text(first + '{"volume_id": "b"}\n')
    with pytest.raises(FormatError) as err:
        read_annotations(path)
    assert err.value.offset == len(first.encode("utf-8"))


def test_crop_inside_has_no_fill():
    volume = Volume("v", np.full((64, 64, 64), 7))
    cube = crop_nodule(volume, (32, 32, 32), 48)
    assert cube.shape == (48, 48, 48)
    assert not np.any(cube == AIR_HU)


def test_crop_at_corner_fill_count():
    volume = Volume("v", np.full((64, 64, 64), 7))
    cube = crop_nodule(volume, (0, 0, 0), 48)
    assert int(np.sum(cube == AIR_HU)) == 48 ** 3 - 24 ** 3 == 96768


def test_triaxial_slice_count():
    records = slice_triaxial(np.zeros((48, 48, 48)), "v", label=1)
    assert len(records) == 144
    assert {r.provenance.axis for r in records} == {"z", "y", "x"}
    assert records[0].image.shape == (48, 48, 3)


def test_empty_mask_gives_no_segmentation_slices():
    assert slice_triaxial(np.zeros((8, 8, 8)), "v", mask=np.zeros((8, 8, 8), dtype=np.uint8)) == []


def test_mask_slices_only_where_nodule():
    mask = np.zeros((8, 8, 8), dtype=np.uint8)
    mask[3, 4, 5] = 1
    records = slice_triaxial(np.zeros((8, 8, 8)), "v", mask=mask)
    assert [(r.provenance.axis, r.provenance.index) for r in records] == [("z", 3), ("y", 4), ("x", 5)]
    assert all(r.mask.sum() == 1 for r in records)


def test_mask_shape_mismatch():
    with pytest.raises(DataError):
        slice_triaxial(np.zeros((8, 8, 8)), "v", mask=np.zeros((8, 8, 4)))


def test_hu_window():
    out = hu_window(np.array([-2000, -1000, -300, 400, 900]))
    assert out.tolist() == pytest.approx([0.0, 0.0, 0.5, 1.0, 1.0])


def test_positive_slice_policies():
    assert positive_slice_indices(48, "center") == {"z": [24], "y": [24], "x": [24]}
    assert positive_slice_indices(48, "through_nodule", radius=2.0)["z"] == [22, 23, 24, 25, 26]
    assert len(positive_slice_indices(16, "all")["x"]) == 16


def test_negative_centers_keep_distance():
    volume = Volume("v", np.zeros((64, 64, 64)))
    nodule = (32, 32, 32)
    centers = sample_negative_centers(volume, [nodule], 4, np.random.default_rng(0), min_distance=20)
    assert len(centers) == 4
    assert len(set(centers)) == 4
    for c in centers:
        assert np.linalg.norm(np.subtract(c, nodule)) >= 20


def test_rgb_views_survive_resize():
    records = slice_triaxial(np.zeros((16, 16, 16)), "v", indices={"z": [8]})
    image = records[0].image
    assert image.strides[2] == 0
    resized = resize_slice(image, 32)
    assert resized.shape == (32, 32, 3)
    assert resized.strides[2] == 0


def test_mask_resize_is_nearest():
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[:2, :2] = 1
    resized = resize_slice(mask, 8, nearest=True)
    assert set(np.unique(resized).tolist()) == {0, 1}
    assert resized[:4, :4].all() and not resized[4:, 4:].any()


def test_load_directory_needs_annotations(tmp_path, pipeline):
    save_volume(tmp_path / "a.swv", Volume("a", np.zeros((8, 8, 8))))
    with pytest.raises(DataError):
        VolumeExtractor(pipeline, 32).load_directory(tmp_path)


def test_load_directory_checks_annotation_targets(tmp_path, pipeline):
    save_volume(tmp_path / "a.swv", Volume("a", np.zeros((8, 8, 8))))
    write_annotations(tmp_path / "annotations.jsonl", [NoduleAnnotation("a", (9, 0, 0))])
    with pytest.raises(DataError):
        VolumeExtractor(pipeline, 32).load_directory(tmp_path)
    write_annotations(tmp_path / "annotations.jsonl", [NoduleAnnotation("b", (1, 1, 1))])
    with pytest.raises(DataError):
        VolumeExtractor(pipeline, 32).load_directory(tmp_path)


def test_load_directory_skips_mask_files(tmp_path, pipeline):
    save_volume(tmp_path / "a.swv", Volume("a", np.zeros((8, 8, 8))))
    save_volume(tmp_path / "a.mask.swv", Volume("a", np.ones((8, 8, 8))))
    write_annotations(tmp_path / "annotations.jsonl", [])
    volumes, annotations = VolumeExtractor(pipeline, 32).load_directory(tmp_path)
    assert [v.id for v in volumes] == ["a"]
    mask = VolumeExtractor(pipeline, 32).volume_mask(volumes[0], annotations, tmp_path)
    assert mask.all()


def test_volume_mask_from_spheres(pipeline):
    volume = Volume("a", np.zeros((16, 16, 16)))
    mask = VolumeExtractor(pipeline, 32).volume_mask(volume, [NoduleAnnotation("a", (8, 8, 8), 4.0)])
    assert mask[8, 8, 8] == 1 and mask[8, 8, 10] == 1 and mask[8, 8, 11] == 0


def test_classification_records(pipeline):
    volume = Volume("a", np.full((48, 48, 48), -700))
    extractor = VolumeExtractor(pipeline, 32)
    pos, neg = extractor.classification_records(volume, [NoduleAnnotation("a", (24, 24, 24))],
                                                np.random.default_rng(0))
    assert len(pos) == 3 and all(r.label == 1 for r in pos)
    assert len(neg) == 3 * pipeline.negatives_per_volume and all(r.label == 0 for r in neg)
    assert pos[0].image.shape == (16, 16, 3)
    assert extractor.resize_record(pos[0]).image.shape == (32, 32, 3)


def test_converter_applies_rescale_and_clips():
    raw = np.array([[[0, 1000], [2000, 40000]]], dtype=np.float64)
    volume = to_volume("scan", raw, (2.5, 0.7, 0.7), slope=1.0, intercept=-1024.0)
    assert volume.voxels.dtype == np.int16
    assert volume.voxels.ravel().tolist() == [-1024, -24, 976, 32767]
    assert volume.spacing == pytest.approx((2.5, 0.7, 0.7))

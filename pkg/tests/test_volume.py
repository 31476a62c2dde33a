import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssbl.volume import (
    DeformationField,
    LabelMask,
    ProbabilityMap,
    StudyManifest,
    VolumeFormatError,
    VolumeGrid,
    clip_intensities,
    load_field,
    load_manifest,
    load_mask,
    load_volume,
    normalize,
    preprocess,
    read_raw,
    save_manifest,
    save_volume,
    write_raw,
)


def ramp(n=4):
    return np.arange(n ** 3, dtype=np.float32).reshape(n, n, n)


def test_ramp_round_trip_identical_bytes(tmp_path):
    v = VolumeGrid(ramp(), (1.0, 1.5, 2.0))
    save_volume(v, tmp_path / "a.vol")
    first = (tmp_path / "a.vol.raw").read_bytes()
    w = load_volume(tmp_path / "a.vol")
    assert np.array_equal(w.data, v.data) and w.spacing == v.spacing
    save_volume(w, tmp_path / "b.vol")
    assert (tmp_path / "b.vol.raw").read_bytes() == first


def test_single_voxel_file_is_four_bytes(tmp_path):
    save_volume(VolumeGrid(np.zeros((1, 1, 1))), tmp_path / "z.vol")
    assert (tmp_path / "z.vol.raw").stat().st_size == 4


def test_size_mismatch_is_rejected(tmp_path):
    (tmp_path / "bad.vol.json").write_text(json.dumps(
        {"dims": [2, 2, 2], "spacing": [1, 1, 1], "channels": 1, "dtype": "f32"}))
    (tmp_path / "bad.vol.raw").write_bytes(np.zeros(7, "<f4").tobytes())
    with pytest.raises(VolumeFormatError, match="needs 32"):
        load_volume(tmp_path / "bad.vol")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nothing.vol")


def test_non_finite_rejected(tmp_path):
    write_raw(tmp_path / "n.vol", np.zeros((2, 2, 2), np.float32), (1, 1, 1))
    raw = np.zeros(8, "<f4")
    raw[5] = np.nan
    (tmp_path / "n.vol.raw").write_bytes(raw.tobytes())
    with pytest.raises(VolumeFormatError, match="non-finite"):
        load_volume(tmp_path / "n.vol")
    with pytest.raises(ValueError):
        VolumeGrid(np.full((2, 2, 2), np.inf))


def test_field_round_trip_component_exact(tmp_path):
    rng = np.random.default_rng(0)
    f = DeformationField(rng.normal(size=(3, 5, 4, 3)).astype(np.float32), (0.5, 1, 2))
    save_volume(f, tmp_path / "f.field")
    g = load_field(tmp_path / "f.field")
    assert g.data.tobytes() == f.data.tobytes() and g.spacing == f.spacing
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "f.field")


def test_mask_round_trip(tmp_path):
    m = LabelMask(np.random.default_rng(1).integers(0, 3, (4, 5, 6)), 3, (1, 2, 3))
    save_volume(m, tmp_path / "m.mask")
    back = load_mask(tmp_path / "m.mask")
    assert np.array_equal(back.data, m.data) and back.num_classes == 3 and back.spacing == (1, 2, 3)


def test_linear_layout_probe(tmp_path):
    data = np.zeros((3, 4, 5), np.float32)
    data[1, 0, 0], data[0, 1, 0], data[0, 0, 1] = 1, 2, 3
    write_raw(tmp_path / "p.vol", data, (1, 1, 1))
    flat = np.frombuffer((tmp_path / "p.vol.raw").read_bytes(), "<f4")
    nx, ny = 3, 4
    assert flat[1] == 1 and flat[nx] == 2 and flat[nx * ny] == 3
    assert np.array_equal(VolumeGrid(data).linear(), flat)
    assert np.array_equal(VolumeGrid.from_linear(flat, data.shape).data, data)


def test_channel_major_layout(tmp_path):
    data = np.stack([np.full((2, 2, 2), c, np.float32) for c in range(3)])
    write_raw(tmp_path / "c.field", data, (1, 1, 1))
    flat = np.frombuffer((tmp_path / "c.field.raw").read_bytes(), "<f4")
    assert np.array_equal(flat, np.repeat([0, 1, 2], 8).astype("<f4"))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(*[st.integers(1, 5)] * 3),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_property(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "v.vol"
    save_volume(VolumeGrid(data), path)
    assert load_volume(path).data.tobytes() == np.asarray(data, np.float32).tobytes()


def test_clip_zero_fraction_is_identity():
    v = VolumeGrid(ramp())
    assert np.array_equal(clip_intensities(v, 0.0).data, v.data)


def test_clip_ramp_oracle():
    values = np.arange(1000, dtype=np.float32).reshape(10, 10, 10)
    out = clip_intensities(VolumeGrid(values), 0.005).data
    # nearest rank: the top 5 of 1000 values are clamped to the 995th smallest
    ceiling = np.sort(values.ravel())[1000 - 1 - 5]
    assert out.max() == ceiling == 994.0
    assert int((values > ceiling).sum()) == 5
    assert np.array_equal(out[values <= ceiling], values[values <= ceiling])


def test_clip_constant_volume_unchanged():
    v = VolumeGrid(np.full((3, 3, 3), 2.5))
    for f in (0.0, 0.1, 0.5, 0.9):
        assert np.array_equal(clip_intensities(v, f).data, v.data)


def test_clip_rejects_bad_fraction():
    with pytest.raises(ValueError):
        clip_intensities(VolumeGrid(ramp()), 1.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (4, 4, 4), elements=st.floats(-100, 100, width=32)),
       st.floats(0.0, 0.5))
def test_clip_idempotent_and_monotone(data, frac):
    v = VolumeGrid(data)
    once = clip_intensities(v, frac)
    assert np.array_equal(clip_intensities(once, frac).data, once.data)
    order = np.argsort(data.ravel(), kind="stable")
    assert np.all(np.diff(once.data.ravel()[order]) >= 0)


def test_normalize_endpoints_and_ramp():
    data = np.linspace(-100, 300, 27, dtype=np.float32).reshape(3, 3, 3)
    out = normalize(VolumeGrid(data)).data
    assert out.min() == 0.0 and out.max() == 1.0
    r = np.arange(256, dtype=np.float32).reshape(4, 8, 8)
    out = normalize(VolumeGrid(r)).data
    assert out.ravel()[128] == np.float32(128 / 255)
    assert np.all(normalize(VolumeGrid(np.full((2, 2, 2), 7.0))).data == 0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (3, 3, 3), elements=st.floats(-1e4, 1e4, width=32)))
def test_normalize_range(data):
    out = normalize(VolumeGrid(data)).data
    assert out.min() >= 0 and out.max() <= 1
    if data.max() > data.min():
        assert out.min() == 0 and out.max() == 1


def test_preprocess_is_clip_then_normalize():
    v = VolumeGrid(np.random.default_rng(3).gamma(2.0, size=(6, 6, 6)))
    assert np.array_equal(preprocess(v, 0.01).data, normalize(clip_intensities(v, 0.01)).data)


def test_probability_map_validation_and_ties():
    with pytest.raises(ValueError):
        ProbabilityMap(np.full((2, 2, 2, 2), 0.7))
    pm = ProbabilityMap(np.full((2, 2, 2, 2), 0.5))
    assert not pm.argmax().data.any()


def test_label_mask_range():
    with pytest.raises(ValueError):
        LabelMask(np.full((2, 2, 2), 2), 2)


def test_manifest_round_trip_and_consistency(tmp_path):
    for t in range(3):
        save_volume(VolumeGrid(ramp() + t, (1, 1, 2)), tmp_path / f"t{t}.vol")
    m = StudyManifest("s", [f"t{t}.vol" for t in range(3)], (1, 1, 2))
    save_manifest(m, tmp_path / "manifest.json")
    back = load_manifest(tmp_path)
    assert back.volumes == m.volumes and back.spacing == (1.0, 1.0, 2.0) and back.num_phases == 3
    save_volume(VolumeGrid(np.zeros((2, 2, 2)), (1, 1, 2)), tmp_path / "t2.vol")
    with pytest.raises(VolumeFormatError):
        load_manifest(tmp_path)


def test_manifest_needs_two_phases():
    with pytest.raises(ValueError):
        StudyManifest("s", ["t0.vol"])


def test_header_fields(tmp_path):
    write_raw(tmp_path / "h.vol", np.zeros((2, 3, 4), np.float32), (1, 2, 3))
    arr, header = read_raw(tmp_path / "h.vol")
    assert header == {"dims": [2, 3, 4], "spacing": [1.0, 2.0, 3.0], "channels": 1, "dtype": "f32"}
    assert arr.shape == (1, 2, 3, 4)

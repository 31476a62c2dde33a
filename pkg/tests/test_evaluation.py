import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssbl.evaluation import (
    EmptySetError,
    boundary_voxels,
    dice,
    endpoint_error,
    hausdorff,
    jaccard,
    per_phase_report,
    read_report_csv,
    write_report_csv,
    write_report_json,
)

masks = arrays(np.uint8, (5, 4, 6), elements=st.integers(0, 1))


def blob(shape, lo, hi):
    m = np.zeros(shape, np.uint8)
    m[tuple(slice(a, b) for a, b in zip(lo, hi))] = 1
    return m


def test_overlap_trivial_cases():
    a = blob((6, 6, 6), (1, 1, 1), (4, 4, 4))
    b = blob((6, 6, 6), (4, 4, 4), (6, 6, 6))
    assert dice(a, a) == 1 and jaccard(a, a) == 1
    assert dice(a, b) == 0 and jaccard(a, b) == 0
    z = np.zeros((2, 2, 2), np.uint8)
    assert dice(z, z) == 1 and jaccard(z, z) == 1
    assert dice(z, z + 1) == 0
    with pytest.raises(ValueError):
        dice(z, np.zeros((2, 2, 3)))


def test_half_overlap_counts():
    a = np.zeros((10, 10, 2), np.uint8)
    b = np.zeros_like(a)
    a[:, :, 0] = 1       # 100 voxels
    b[:, :5, 0] = 1      # 50 shared
    b[:, :5, 1] = 1      # 100 total
    assert dice(a, b) == 0.5
    assert math.isclose(jaccard(a, b), 1 / 3)


@settings(max_examples=50, deadline=None)
@given(masks, masks)
def test_duality_and_symmetry(a, b):
    d, j = dice(a, b), jaccard(a, b)
    assert abs(j - d / (2 - d)) <= 1e-9
    assert d == dice(b, a) and j == jaccard(b, a)
    assert 0 <= d <= 1 and 0 <= j <= 1


def test_relabeling_other_classes_is_invisible():
    rng = np.random.default_rng(0)
    a, b = rng.integers(0, 3, (6, 6, 6)), rng.integers(0, 3, (6, 6, 6))
    a2, b2 = np.where(a == 2, 0, a), np.where(b == 0, 2, b)
    assert dice(a, b, 1) == dice(a2, b2, 1) and jaccard(a, b, 1) == jaccard(a2, b2, 1)
    if (a == 1).any() and (b == 1).any():
        assert hausdorff(a, b, 1) == hausdorff(a2, b2, 1)


def test_hausdorff_three_four_five():
    a, b = np.zeros((5, 5, 1), np.uint8), np.zeros((5, 5, 1), np.uint8)
    a[0, 0, 0], b[3, 4, 0] = 1, 1
    assert hausdorff(a, b) == 5.0
    assert hausdorff(a, b, method="brute") == 5.0
    assert hausdorff(a, b, spacing=(2, 2, 1)) == 10.0


def test_hausdorff_identity_and_empty():
    a = blob((8, 8, 8), (2, 2, 2), (6, 6, 6))
    assert hausdorff(a, a) == 0
    with pytest.raises(EmptySetError):
        hausdorff(a, np.zeros_like(a))
    with pytest.raises(EmptySetError):
        hausdorff(np.zeros_like(a), np.zeros_like(a))


def test_hausdorff_uses_boundary_voxels():
    a = blob((9, 9, 9), (1, 1, 1), (8, 8, 8))
    surface = boundary_voxels(a.astype(bool))
    assert surface.sum() == 7 ** 3 - 5 ** 3
    # a filled cube and its hollow shell share a boundary
    assert hausdorff(a, surface.astype(np.uint8)) == 0


def test_hausdorff_zero_iff_equal_boundaries():
    a = blob((8, 8, 8), (2, 2, 2), (6, 6, 6))
    b = a.copy()
    b[5, 5, 5] = 0  # changes the boundary
    assert hausdorff(a, b) > 0


def brute_oracle(a, b, spacing):
    pa = np.argwhere(boundary_voxels(a == 1)) * np.asarray(spacing)
    pb = np.argwhere(boundary_voxels(b == 1)) * np.asarray(spacing)
    d = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1))
    return max(d.min(1).max(), d.min(0).max())


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (9, 7, 8), elements=st.integers(0, 1)),
       arrays(np.uint8, (9, 7, 8), elements=st.integers(0, 1)),
       st.sampled_from([(1.0, 1.0, 1.0), (0.7, 1.3, 2.5)]), st.integers(1, 5))
def test_grid_equals_brute_exactly(a, b, spacing, cell):
    if not a.any() or not b.any():
        return
    grid = hausdorff(a, b, spacing=spacing, cell=cell)
    assert grid == hausdorff(a, b, spacing=spacing, method="brute")
    assert np.isclose(grid, brute_oracle(a, b, spacing), rtol=1e-12)
    assert grid == hausdorff(b, a, spacing=spacing, cell=cell)


def test_hausdorff_monotone_under_dilation_of_far_set():
    a = blob((16, 16, 16), (2, 2, 2), (5, 5, 5))
    b = blob((16, 16, 16), (9, 9, 9), (12, 12, 12))
    before = hausdorff(a, b)
    b2 = b.copy()
    b2[12, 9:12, 9:12] = 1  # grow B at its far face
    assert hausdorff(a, b2) >= before


def test_endpoint_error_cases():
    truth = np.zeros((3, 3, 3, 3))
    assert endpoint_error(truth, truth) == 0
    f = np.zeros_like(truth)
    f[0], f[1] = 3, 4
    assert endpoint_error(f, truth) == 5
    rng = np.random.default_rng(1)
    f, g = rng.normal(size=(3, 2, 3, 2)), rng.normal(size=(3, 2, 3, 2))
    vals = [math.sqrt(sum((f[c][i] - g[c][i]) ** 2 for c in range(3))) for i in np.ndindex(2, 3, 2)]
    assert math.isclose(endpoint_error(f, g), sum(vals) / len(vals), rel_tol=1e-12)
    with pytest.raises(ValueError):
        endpoint_error(f, g[:2])


def test_identical_lists_give_ones():
    m = [blob((8, 8, 8), (2, 2, 2), (6, 6, 6 - k)) for k in range(3)]
    rep = per_phase_report(m, m)
    assert all(r.dice == 1 and r.jaccard == 1 and r.hausdorff_mm == 0 for r in rep.records)
    assert rep.mean_dice() == 1


def test_two_phase_hand_case():
    g0 = blob((4, 4, 4), (0, 0, 0), (2, 2, 2))      # 8 voxels
    p0 = blob((4, 4, 4), (0, 0, 0), (2, 2, 1))      # 4 voxels inside g0
    g1 = blob((4, 4, 4), (0, 0, 0), (1, 1, 1))
    p1 = blob((4, 4, 4), (3, 0, 0), (4, 1, 1))
    rep = per_phase_report([p0, p1], [g0, g1], spacing=(1, 1, 2), study_id="s")
    r0, r1 = rep.records
    assert (r0.time_index, r0.study_id) == (0, "s")
    assert math.isclose(r0.dice, 2 * 4 / 12) and math.isclose(r0.jaccard, 4 / 8)
    # every boundary voxel of g0 at z = 1 lies 2 mm from the p0 slab
    assert r0.hausdorff_mm == 2.0
    assert r1.dice == 0 and r1.jaccard == 0 and r1.hausdorff_mm == 3.0
    mean = [r for r in rep.summary if r.kind == "mean"][0]
    std = [r for r in rep.summary if r.kind == "std"][0]
    assert math.isclose(mean.dice, (2 / 3) / 2) and math.isclose(std.dice, (2 / 3) / 2)
    assert math.isclose(mean.hausdorff_mm, 2.5) and math.isclose(std.hausdorff_mm, 0.5)


def test_empty_prediction_is_marked_and_skipped():
    g = blob((6, 6, 6), (1, 1, 1), (4, 4, 4))
    rep = per_phase_report([g, np.zeros_like(g)], [g, g])
    assert rep.records[1].error == "empty-set" and rep.records[1].hausdorff_mm is None
    assert rep.records[1].dice == 0
    assert rep.skipped == 1
    mean = [r for r in rep.summary if r.kind == "mean"][0]
    assert mean.hausdorff_mm == 0 and mean.dice == 0.5


def test_report_files_round_trip(tmp_path):
    g = blob((6, 6, 6), (1, 1, 1), (4, 4, 4))
    p = blob((6, 6, 6), (1, 1, 1), (4, 4, 3))
    rep = per_phase_report([p, np.zeros_like(g)], [g, g], study_id="x", classes=(0, 1))
    write_report_csv(rep.rows(), tmp_path / "r.csv")
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == "study_id,time_index,class_id,dice,jaccard,hausdorff_mm,epe_voxels,error,kind"
    back = read_report_csv(tmp_path / "r.csv")
    assert back == rep.rows()
    write_report_json(rep, tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["skipped_hausdorff"] == 1 and len(doc["per_phase"]) == 4
    assert {r["kind"] for r in doc["summary"]} == {"mean", "std"}

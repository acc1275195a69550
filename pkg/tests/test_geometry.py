import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import project_points, random_pose
from kprefine.exceptions import AmbiguousCheiralityError, DegenerateGeometryError, InvalidInputError
from kprefine.geometry import (
    CameraIntrinsics,
    RelativePose,
    auc,
    decompose_essential,
    epipolar_distance,
    epipolar_error,
    epipolar_error_grad,
    epipolar_loss,
    essential_from_pose,
    normalize_point,
    normalized_threshold,
    pose_error,
    rotation_from_axis_angle,
    skew,
)

E_X = essential_from_pose(RelativePose(np.eye(3), [1.0, 0.0, 0.0]))


@pytest.mark.parametrize(
    "k, p, expected",
    [
        ((500, 500, 320, 240), (320, 240), (0, 0, 1)),
        ((500, 500, 320, 240), (820, 240), (1, 0, 1)),
        ((400, 600, 0, 0), (200, 300), (0.5, 0.5, 1)),
    ],
)
def test_normalize_point(k, p, expected):
    np.testing.assert_array_equal(normalize_point(CameraIntrinsics(*k), p), expected)


def test_normalize_point_rejects_non_finite(k500):
    with pytest.raises(InvalidInputError):
        normalize_point(k500, (np.nan, 1.0))
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0)


def test_essential_from_pose_cross_product_matrices():
    np.testing.assert_array_equal(E_X, [[0, 0, 0], [0, 0, -1], [0, 1, 0]])
    e_z = essential_from_pose(RelativePose(np.eye(3), [0.0, 0.0, 1.0]))
    np.testing.assert_array_equal(e_z, [[0, -1, 0], [1, 0, 0], [0, 0, 0]])


def test_essential_from_pose_exact_projections(rng):
    pose = random_pose(rng)
    n1, n2 = project_points(pose, 50, rng)
    e = essential_from_pose(pose)
    assert np.max(np.abs(np.einsum("ni,ij,nj->n", n2, e, n1))) < 1e-12


def test_epipolar_error_hand_values():
    assert epipolar_error([0, 0, 1], [0, 0, 1], E_X) == 0.0
    # E n1 = (0,-1,0), E^T n2 = (0,1,-1): numerator 1, denominator 2
    assert epipolar_error([0, 0, 1], [0, 1, 1], E_X) == pytest.approx(0.5, abs=1e-15)
    assert epipolar_distance([0, 0, 1], [0, 1, 1], E_X) == pytest.approx(np.sqrt(0.5), abs=1e-15)


def test_epipolar_error_degenerate():
    with pytest.raises(DegenerateGeometryError):
        epipolar_error([0, 0, 1], [0, 0, 1], np.zeros((3, 3)))


def test_epipolar_error_scale_invariant(rng):
    n1 = np.column_stack([rng.normal(size=(20, 2)), np.ones(20)])
    n2 = np.column_stack([rng.normal(size=(20, 2)), np.ones(20)])
    e = rng.normal(size=(3, 3))
    np.testing.assert_allclose(epipolar_error(n1, n2, 7 * e), epipolar_error(n1, n2, e), rtol=1e-12)


finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 2, elements=finite), arrays(np.float64, 2, elements=finite),
       arrays(np.float64, (3, 3), elements=finite))
def test_epipolar_error_swap_symmetry(a, b, e):
    n1, n2 = np.append(a, 1.0), np.append(b, 1.0)
    try:
        ref = epipolar_error(n1, n2, e)
    except DegenerateGeometryError:
        return
    assert epipolar_error(n2, n1, e.T) == pytest.approx(ref, rel=1e-12, abs=1e-300)


def test_epipolar_error_grad_matches_central_differences(rng):
    h = 1e-6
    for _ in range(20):
        e = rng.normal(size=(3, 3))
        n1 = np.append(rng.normal(size=2), 1.0)
        n2 = np.append(rng.normal(size=2), 1.0)
        _, g1, g2 = epipolar_error_grad(n1, n2, e)
        for g, which in ((g1, 0), (g2, 1)):
            for j in range(2):
                pts = [n1.copy(), n2.copy()]
                pts[which][j] += h
                fp = epipolar_error(*pts, e)
                pts[which][j] -= 2 * h
                fm = epipolar_error(*pts, e)
                assert g[j] == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-9)


@pytest.mark.parametrize("tp", [0.003, 0.5, 2.0])
def test_epipolar_loss_branches(tp):
    # e = (y)^2 / 2 for n1=(0,0,1), n2=(0,y,1) under E_X, so distance d = |y| / sqrt(2)
    def pts_for_error(err):
        return [0, 0, 1], [0, np.sqrt(2 * err), 1]

    assert epipolar_loss(*pts_for_error(tp**2 / 4), E_X, tp) == pytest.approx(tp**2 / 4, rel=1e-12)
    assert epipolar_loss(*pts_for_error(4 * tp**2), E_X, tp) == tp
    # exact boundary lands in the constant branch; build points whose error is exactly t'^2
    n1, n2 = [0, 0, 1], [0, 1.0, 1]
    e = epipolar_error(n1, n2, E_X)
    assert epipolar_loss(n1, n2, E_X, np.sqrt(e)) == np.sqrt(e)


@pytest.mark.parametrize(
    "t, focals, expected",
    [(1.5, (500, 500, 500, 500), 0.003), (1.5, (400, 400, 600, 600), 0.003), (1.0, (1000,) * 4, 0.001)],
)
def test_normalized_threshold(t, focals, expected):
    k1 = CameraIntrinsics(focals[0], focals[1], 0, 0)
    k2 = CameraIntrinsics(focals[2], focals[3], 0, 0)
    assert normalized_threshold(t, k1, k2) == pytest.approx(expected, rel=1e-15)


def test_decompose_known_pose(rng):
    pose = RelativePose(np.eye(3), [1.0, 0.0, 0.0])
    n1, n2 = project_points(pose, 20, rng)
    e = essential_from_pose(pose)
    for scale in (1.0, -3.0):
        est = decompose_essential(scale * e, n1, n2)
        assert pose_error(est, pose) < 1e-6


def test_decompose_random_poses(rng):
    for _ in range(20):
        pose = random_pose(rng, 60)
        n1, n2 = project_points(pose, 100, rng)
        est = decompose_essential(essential_from_pose(pose), n1, n2)
        assert pose_error(est, pose) < 1e-5


def test_decompose_ambiguous_cheirality():
    # rays along the optical axis are parallel: no candidate puts any point in front
    e = essential_from_pose(RelativePose(np.eye(3), [1.0, 0.0, 0.0]))
    axis = np.tile([0.0, 0.0, 1.0], (2, 1))
    with pytest.raises(AmbiguousCheiralityError):
        decompose_essential(e, axis, axis)


def test_pose_error_constructions():
    gt = RelativePose(np.eye(3), [1.0, 0.0, 0.0])
    assert pose_error(gt, gt) == 0.0
    rz = rotation_from_axis_angle([0, 0, 1], np.radians(10))
    assert pose_error(RelativePose(rz, [1.0, 0, 0]), gt) == pytest.approx(10.0, abs=1e-9)
    a = np.radians(25)
    t25 = RelativePose(np.eye(3), [np.cos(a), np.sin(a), 0.0])
    assert pose_error(t25, gt) == pytest.approx(25.0, abs=1e-9)


def test_pose_error_symmetric(rng):
    for _ in range(50):
        a, b = random_pose(rng, 90), random_pose(rng, 90)
        assert pose_error(a, b) == pytest.approx(pose_error(b, a), abs=1e-9)


def test_auc_values():
    for th in (5, 10, 20):
        assert auc([0.0, 0.0], th) == 1.0
    assert auc([5.0], 5) == 0.0
    assert auc([2.5], 5) == 0.5
    assert auc([180.0, 0.0], 10) == 0.5
    with pytest.raises(InvalidInputError):
        auc([], 5)


def test_auc_matches_numerical_integration():
    errs = np.array([0.3, 1.7, 2.2, 4.9, 7.0, 180.0])
    grid = np.linspace(0, 5, 2_000_001)
    recall = (errs[None, :] < grid[:, None]).mean(axis=1)
    assert auc(errs, 5) == pytest.approx(np.trapezoid(recall, grid) / 5, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 30), min_size=1, max_size=20), st.data())
def test_auc_monotone(errs, data):
    i = data.draw(st.integers(0, len(errs) - 1))
    lowered = list(errs)
    lowered[i] = data.draw(st.floats(0, errs[i]))
    for th in (5, 10, 20):
        assert auc(lowered, th) >= auc(errs, th)


def test_skew_is_cross_product(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-15)

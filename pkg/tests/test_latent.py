import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from keydyn import autodiff as ad
from keydyn.config import DEFAULTS
from keydyn.core import Pose2
from keydyn.latent import (DescriptorSet, InsufficientMask, MissingWeights, SelectionInfeasible, build_latent,
                           confidence_stats, init_alpha, latent_dim, observe, row_softmax, sample_ds, select_sds,
                           wds_map)
from keydyn.sim import make_task
from keydyn.vision import DescriptorImage, DimensionMismatch, render


@pytest.fixture(scope="module")
def box_ref():
    task = make_task("top_down")
    return task, render(task.cameras[0], task.make_shape(), Pose2(0.0, 0.0, 0.3))


def test_sample_ds(box_ref):
    _, img = box_ref
    ds = sample_ds(img, 50, np.random.default_rng(0))
    assert len(ds) == 50 and len(np.unique(ds.descriptors, axis=0)) == 50
    assert len(sample_ds(img, 1, np.random.default_rng(0))) == 1
    again = sample_ds(img, 50, np.random.default_rng(0))
    assert np.array_equal(ds.descriptors, again.descriptors) and np.array_equal(ds.pixels, again.pixels)
    with pytest.raises(InsufficientMask):
        sample_ds(img, int(img.mask.sum()) + 1, np.random.default_rng(0))


def test_descriptor_set_json_round_trip(box_ref, tmp_path):
    ds = sample_ds(box_ref[1], 7, np.random.default_rng(1))
    ds.save(tmp_path / "d.json")
    back = DescriptorSet.load(tmp_path / "d.json")
    assert np.array_equal(back.descriptors, ds.descriptors) and back.meta == ds.meta


def test_confidence_stats_examples():
    desc = np.random.default_rng(0).random((6, 8, 3))
    frames = [DescriptorImage(desc, np.ones((6, 8)), np.ones((6, 8), bool))] * 4
    cands = DescriptorSet(desc[[1, 4], [2, 5]], np.zeros((2, 2)), np.zeros((2, 3)))
    frac, mean = confidence_stats(cands, frames, tau=0.5)
    assert np.all(frac == 1.0)
    frac, _ = confidence_stats(cands, frames, tau=1.01)
    assert np.all(frac == 0.0)


def test_confidence_top_vs_side_on_occlusions():
    task = make_task("occlusions")
    cam, shape = task.cameras[0], task.make_shape()
    frames = [render(cam, shape, Pose2(0, 0, th)) for th in np.linspace(-np.pi, np.pi, 72, endpoint=False)]
    top = [i for i, f in enumerate(shape.anchor_faces) if f == "top"]
    side = [i for i, f in enumerate(shape.anchor_faces) if f.startswith("side")]
    cands = DescriptorSet(shape.descriptor(shape.anchors), np.zeros((len(shape.anchors), 2)), shape.anchors)
    frac, _ = confidence_stats(cands, frames, tau=DEFAULTS["latent"]["tau_conf"])
    assert np.all(frac[top] == 1.0)
    assert np.all(frac[side] < 1.0)


def _cands(pixels):
    n = len(pixels)
    return DescriptorSet(np.arange(3 * n, dtype=float).reshape(n, 3), np.array(pixels, float), np.zeros((n, 3)))


def test_select_sds_separation_and_ties():
    c = _cands([[10, 10], [10, 10], [30, 10], [10, 40]])
    s = select_sds(c, [0.5, 0.9, 0.4, 0.3], 3, 6.25)
    assert s.meta["candidate_index"] == [1, 2, 3]
    # equal scores: lower candidate index wins
    s = select_sds(c, [0.5, 0.5, 0.4, 0.3], 1, 6.25)
    assert s.meta["candidate_index"] == [0]
    with pytest.raises(SelectionInfeasible):
        select_sds(c, [0.5, 0.9, 0.4, 0.3], 4, 6.25)
    with pytest.raises(SelectionInfeasible):
        select_sds(c, [1, 1, 1, 1], 5, 1.0)


def test_min_sep_scaled_from_full_resolution():
    from keydyn.harness import min_separation

    assert min_separation(make_task("top_down"), DEFAULTS["latent"]) == pytest.approx(25.0 * 160 / 640)
    assert min_separation(make_task("occlusions"), DEFAULTS["latent"]) == pytest.approx(25.0 * 320 / 640)
    assert min_separation(make_task("occlusions"), {"min_sep_px": 3}) == 3.0
    assert DEFAULTS["latent"]["K_star"] in (4, 5)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_select_sds_invariant_to_order(seed):
    rng = np.random.default_rng(seed)
    n = 12
    c = _cands(rng.uniform(0, 60, (n, 2)))
    scores = rng.permutation(n) / n  # distinct
    perm = rng.permutation(n)
    a = select_sds(c, scores, 3, 6.25)
    try:
        b = select_sds(c.subset(perm), scores[perm], 3, 6.25)
    except SelectionInfeasible:
        pytest.fail("permutation changed feasibility")
    assert sorted(map(tuple, a.pixels)) == sorted(map(tuple, b.pixels))


def test_observe_top_down_accuracy(box_ref):
    task, _ = box_ref
    cam, shape = task.cameras[0], task.make_shape()
    pose = Pose2(0.02, 0.03, 1.0)
    img = render(cam, shape, pose)
    top = [i for i, f in enumerate(shape.anchor_faces) if f == "top"]
    ds = DescriptorSet(shape.descriptor(shape.anchors[top]), np.zeros((len(top), 2)), shape.anchors[top])
    obs = observe(ds, img, cam)
    assert np.all(np.linalg.norm(obs.points - pose.to_world(shape.anchors[top]), axis=1) < 0.01)
    again = observe(ds, img, cam)
    assert np.array_equal(obs.points, again.points) and np.array_equal(obs.confidence, again.confidence)


def test_observe_occluded_anchor_drifts():
    task = make_task("occlusions")
    cam, shape = task.cameras[0], task.make_shape()
    ds = DescriptorSet(shape.descriptor(shape.anchors), np.zeros((len(shape.anchors), 2)), shape.anchors)
    faces = shape.anchor_faces
    errs = []
    for th in np.linspace(-np.pi, np.pi, 36, endpoint=False):
        pose = Pose2(0, 0, th)
        obs = observe(ds, render(cam, shape, pose), cam)
        errs.append(np.linalg.norm(obs.points - pose.to_world(shape.anchors), axis=1))
    errs = np.array(errs)
    top = [i for i, f in enumerate(faces) if f == "top"]
    for j in [i for i, f in enumerate(faces) if f.startswith("side")]:
        assert errs[:, j].max() > errs[:, top].max()


def test_wds_map_examples():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((5, 3))
    out = wds_map(y, np.zeros((5, 5)))
    assert np.allclose(out, y.mean(axis=0))
    out = wds_map(y, init_alpha(5, 20.0))
    assert np.allclose(out, y, atol=1e-6 * np.abs(y).max() * 5)
    with pytest.raises(DimensionMismatch):
        wds_map(y, np.zeros((4, 4)))


def test_wds_map_gradient():
    rng = np.random.default_rng(1)
    y, alpha = rng.standard_normal((4, 3)), rng.standard_normal((4, 4))
    w = rng.standard_normal((4, 3))
    rep = ad.grad_check(lambda p: ad.sum(ad.mul(wds_map(p[0], p[1]), w)), [y, alpha])
    assert rep["max_rel_err"] < 1e-4


@settings(max_examples=50)
@given(arrays(float, (4, 4), elements=st.floats(-800, 800)))
def test_row_softmax_stable(alpha):
    s = row_softmax(alpha)
    assert np.all(s >= 0) and np.allclose(s.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=50)
@given(arrays(float, (3, 3), elements=st.floats(-5, 5)), st.integers(0, 1000))
def test_wds_output_in_convex_hull(alpha, seed):
    y = np.random.default_rng(seed).standard_normal((3, 2))
    out = wds_map(y, alpha)
    # barycentric coordinates w.r.t. the input triangle are nonnegative
    T = np.vstack([y.T, np.ones(3)])
    if abs(np.linalg.det(T)) < 1e-6:
        return
    for p in out:
        lam = np.linalg.solve(T, np.append(p, 1.0))
        assert np.all(lam >= -1e-9)


def test_build_latent_dimensions():
    y50, y5 = np.zeros((50, 3)), np.zeros((5, 3))
    assert build_latent("DS", y50).shape == (150,)
    assert build_latent("SDS", y5).shape == (15,)
    assert build_latent("DS", y50, o_robot=np.zeros(2)).shape == (latent_dim(50),)
    assert build_latent("SDS", np.zeros((7, 5, 3)), o_robot=np.zeros((7, 2))).shape == (7, 17)
    y = np.random.default_rng(0).standard_normal((5, 3))
    sds = build_latent("SDS", y, o_robot=np.ones(2))
    wsds = build_latent("WSDS", y, init_alpha(5, 20.0), np.ones(2))
    assert np.allclose(sds, wsds, atol=1e-6)
    with pytest.raises(MissingWeights):
        build_latent("WDS", y)
    with pytest.raises(ValueError):
        build_latent("SDS", y, alpha=np.eye(5))

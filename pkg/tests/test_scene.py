import numpy as np
import pytest

from zbufdepth import scene as sc
from zbufdepth.errors import InvalidInput
from zbufdepth.geometry import Intrinsics, RigidTransform, invert, splat
from zbufdepth.zbuffer import zbuffer_parallel

INTR = Intrinsics(100.0, 100.0, 19.5, 4.5, 40, 10)


def two_cameras(t1_translation, prims, intr=INTR):
    return sc.SceneSpec(tuple(prims), sc.Camera(intr),
                        sc.Camera(intr, RigidTransform(np.eye(3), t1_translation)))


def pipeline_visibility(gt):
    """Visible mask over frame-t pixels according to geometry + zbuffer."""
    intr = gt.intrinsics
    cloud, _, out = splat(gt.depth_t, invert(gt.pose), intr)
    cand = out.in_frame_positive
    zres = zbuffer_parallel(out.depth[cand], out.raster_index[cand], intr.cell_count)
    vis = np.zeros(intr.cell_count, dtype=bool)
    vis[cloud.source_cells[cand[zres.visible]]] = True
    return vis.reshape(intr.shape)


def test_single_plane_identity_pose():
    gt = sc.generate(two_cameras([0, 0, 0], [sc.Primitive(10.0)]))
    assert gt.visible_t_to_t1.all()
    assert not gt.negative_set_t_to_t1.any()
    np.testing.assert_allclose(gt.depth_t.values, 10.0)
    np.testing.assert_array_equal(gt.image_t.pixels, gt.image_t1.pixels)


def test_occlusion_band_closed_form():
    # disparities: 5 px for the box at z=10, 1 px for the plane at z=50.
    box = sc.rect_from_pixels(INTR, 10, 19, 0, 9, 10.0)
    gt = sc.generate(two_cameras([0.5, 0, 0], [sc.Primitive(50.0), box]))
    cols = np.arange(40)
    expected = np.ones(40, bool)
    expected[0] = False                 # background column 0 lands at u = -1
    expected[6:10] = False              # lands behind the box, which now spans 5..14
    np.testing.assert_array_equal(gt.visible_t_to_t1, np.tile(expected, (10, 1)))
    assert cols[~gt.landing_t_to_t1[0]].tolist() == [0]
    np.testing.assert_array_equal(pipeline_visibility(gt), gt.visible_t_to_t1)


def test_point_between_cameras_is_negative():
    # camera t+1 moves 2 m forward; the near box at z = 1 ends up behind it
    near = sc.rect_from_pixels(INTR, 18, 21, 3, 6, 1.0)
    gt = sc.generate(two_cameras([0, 0, 2.0], [sc.Primitive(10.0), near]))
    expected = np.zeros(INTR.shape, bool)
    expected[3:7, 18:22] = True
    np.testing.assert_array_equal(gt.negative_set_t_to_t1, expected)
    assert not (gt.visible_t_to_t1 & expected).any()


def test_primitive_behind_camera_rejected():
    with pytest.raises(InvalidInput):
        sc.generate(two_cameras([0, 0, 0], [sc.Primitive(-1.0)]))
    with pytest.raises(InvalidInput):
        sc.generate(two_cameras([0, 0, 0], [sc.Primitive(0.0)]))


def test_spec_validation():
    with pytest.raises(InvalidInput):
        sc.Primitive(5.0, texture="marble")
    with pytest.raises(InvalidInput):
        sc.Primitive(5.0, bounds=(1, 0, 0, 1))
    with pytest.raises(InvalidInput):
        sc.SceneSpec((), sc.Camera(INTR), sc.Camera(INTR), noise=-0.1)
    other = Intrinsics(50.0, 50.0, 0, 0, 40, 10)
    with pytest.raises(InvalidInput):
        sc.SceneSpec((), sc.Camera(INTR), sc.Camera(other))


def test_kitti_like_properties():
    spec = sc.kitti_like_spec(11)
    assert 11 <= len(spec.primitives) <= 51
    gt = sc.generate(spec, visibility=False)
    assert gt.depth_t.shape == (352, 1216)
    vals = gt.depth_t.values[gt.depth_t.validity]
    assert vals.max() <= 80.0 and vals.min() > 1.0
    again = sc.generate(sc.kitti_like_spec(11), visibility=False)
    np.testing.assert_array_equal(again.depth_t.values, gt.depth_t.values)
    np.testing.assert_array_equal(again.image_t1.pixels, gt.image_t1.pixels)


def test_perturb_depth():
    gt = sc.generate(sc.smooth_spec(2), visibility=False)
    assert sc.perturb_depth(gt, 0.0, 1) is gt.depth_t
    noisy = sc.perturb_depth(gt, 0.05, 1)
    delta = noisy.values - gt.depth_t.values
    assert np.abs(delta).max() <= 0.05 and np.abs(delta).max() > 0
    np.testing.assert_array_equal(noisy.values, sc.perturb_depth(gt, 0.05, 1).values)
    np.testing.assert_array_equal(noisy.validity, gt.depth_t.validity)
    huge = sc.perturb_depth(gt, 100.0, 3, "t1")
    assert huge.values[huge.validity].min() > 0
    with pytest.raises(InvalidInput):
        sc.perturb_depth(gt, -1.0, 0)


def test_json_round_trip():
    for spec in (sc.smooth_spec(4), sc.occlusion_band_spec(1)):
        back = sc.SceneSpec.from_json(spec.to_json())
        assert back.to_dict() == spec.to_dict()
        np.testing.assert_array_equal(sc.generate(back).depth_t1.values,
                                      sc.generate(spec).depth_t1.values)
    with pytest.raises(InvalidInput):
        sc.SceneSpec.from_dict({"primitives": []})


def test_relative_pose_convention():
    spec = sc.smooth_spec(0)
    gt = sc.generate(spec, visibility=False)
    # a world point seen by camera t+1, mapped by the pose, matches camera t's view
    p_world = np.array([0.3, -0.2, 7.0])
    in_t = spec.camera_t.pose.inverse().apply(p_world[None])
    in_t1 = spec.camera_t1.pose.inverse().apply(p_world[None])
    np.testing.assert_allclose(gt.pose.apply(in_t1), in_t, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_pipeline_matches_ground_truth(seed):
    gt = sc.generate(sc.occlusion_band_spec(seed))
    assert (gt.landing_t_to_t1 & ~gt.visible_t_to_t1).any() or seed
    np.testing.assert_array_equal(pipeline_visibility(gt), gt.visible_t_to_t1)


def test_swapped_scene():
    spec = sc.occlusion_band_spec(2)
    rev = sc.swapped(spec)
    a, b = sc.generate(spec), sc.generate(rev)
    np.testing.assert_array_equal(a.depth_t.values, b.depth_t1.values)
    np.testing.assert_allclose(invert(a.pose).as_matrix(), b.pose.as_matrix(), atol=1e-12)

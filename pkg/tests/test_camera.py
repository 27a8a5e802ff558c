import numpy as np
import pytest

from mv3d.camera import CameraView, DepthMap, cell_center_pixels, project, \
    project_tensor, unproject, unproject_grid
from mv3d.checks import random_camera
from mv3d.nn.gradcheck import grad_check
from mv3d.nn.tensor import Tensor
from mv3d.rng import Stream
from mv3d.scene import SceneSpec, depth_at, generate_scene


def simple_camera(f=100.0, c=50.0, wh=101):
    k = np.array([[f, 0, c], [0, f, c], [0, 0, 1.0]])
    return CameraView(k, np.eye(3), np.zeros(3), wh, wh, view_id=0)


class TestCameraView:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError, match="orthonormal"):
            CameraView(np.eye(3), np.eye(3) * 1.01, np.zeros(3), 8, 8, 0)

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError, match="determinant"):
            CameraView(np.eye(3), r, np.zeros(3), 8, 8, 0)

    def test_rejects_bad_intrinsics(self):
        k = np.array([[100.0, 0, 50], [5.0, 100, 50], [0, 0, 1]])
        with pytest.raises(ValueError, match="upper-triangular"):
            CameraView(k, np.eye(3), np.zeros(3), 8, 8, 0)


class TestProject:
    def test_optical_axis_hits_principal_point(self):
        uv, z = project(np.array([0.0, 0.0, 1.0]), simple_camera())
        assert np.allclose(uv, [0.5, 0.5])
        assert z == 1.0

    def test_zero_depth_clamped_by_epsilon(self):
        cam = simple_camera()
        uv, z = project(np.array([0.0, 0.0, 0.0]), cam, eps=0.01)
        assert z == 0.0
        assert np.all(uv >= 0.0) and np.all(uv <= 1.0)
        # off-axis point at zero depth blows up and clamps to the border
        uv2, _ = project(np.array([0.5, 0.0, 0.0]), cam, eps=0.01)
        assert uv2[0] == 1.0

    def test_pinhole_arithmetic(self):
        uv, _ = project(np.array([0.25, 0.0, 1.0]), simple_camera())
        assert np.allclose(uv, [0.75, 0.5])

    def test_tensor_variant_matches_numpy(self):
        cam = random_camera(Stream(3))
        pts = Stream(4).uniform((20, 3), -0.3, 0.4)
        uv_np, z_np = project(pts, cam)
        uv_t, z_t = project_tensor(Tensor(pts), cam)
        assert np.abs(uv_t.data - uv_np).max() < 1e-12
        assert np.abs(z_t.data - z_np).max() < 1e-12

    def test_projection_gradients(self):
        cam = random_camera(Stream(5))
        p = Tensor(np.array([[0.05, -0.1, 0.2]]), requires_grad=True)
        rep = grad_check(lambda: project_tensor(p, cam)[0].sum(), {"p": p})
        assert rep.passed

    def test_normalized_output_always_in_unit_square(self):
        cam = random_camera(Stream(6))
        pts = Stream(7).uniform((500, 3), -3.0, 3.0)
        uv, _ = project(pts, cam)
        assert uv.min() >= 0.0 and uv.max() <= 1.0


class TestUnproject:
    def test_principal_ray(self):
        out = unproject(np.array([50.0, 50.0]), 2.0, simple_camera())
        assert np.allclose(out, [0.0, 0.0, 2.0])

    def test_roundtrip_1000_points(self):
        cam = random_camera(Stream(8))
        s = Stream(9)
        pts = np.stack([s.uniform(1000, -0.4, 0.4), s.uniform(1000, -0.4, 0.4),
                        s.uniform(1000, 0.0, 0.5)], axis=-1)
        z_cam = (pts @ cam.r.T + cam.t)[:, 2]
        pts = pts[z_cam > 0.1]
        uv, z = project(pts, cam)
        # the normalization clamps at the image border; the identity is only
        # claimed for in-frustum points
        inside = (uv > 1e-3).all(axis=1) & (uv < 1 - 1e-3).all(axis=1)
        assert inside.sum() > 500
        pix = uv[inside] * (np.array([cam.width, cam.height]) - 1)
        back = unproject(pix, z[inside], cam)
        assert np.abs(back - pts[inside]).max() < 1e-9

    def test_rejects_nonpositive_depth(self):
        with pytest.raises(ValueError):
            unproject(np.array([1.0, 1.0]), 0.0, simple_camera())

    def test_two_views_agree_on_surface_point(self):
        scene = generate_scene(11, SceneSpec(num_objects=1, num_views=2, feat_hw=32))
        prims = scene.primitives()
        cam_a, cam_b = scene.observation.cameras
        # take visible pixels of the object in view A and re-observe from B
        sel = scene.observation.features[0, 4] > 0.5
        ys, xs = np.where(sel)
        pix_a = np.stack([xs, ys], axis=-1).astype(float)[:40]
        depth_a = scene.observation.depths[0].depth[sel][:40]
        world = unproject(pix_a, depth_a, cam_a)
        uv_b, z_b = project(world, cam_b)
        pix_b = uv_b * (np.array([cam_b.width, cam_b.height]) - 1)
        t_b, idx_b = depth_at(prims, cam_b, pix_b)
        visible = np.abs(t_b - z_b) < 1e-6
        assert visible.any()
        back = unproject(pix_b[visible], t_b[visible], cam_b)
        assert np.abs(back - world[visible]).max() < 1e-6


class TestUnprojectGrid:
    def test_flat_plane_constant_z(self):
        cam = simple_camera(wh=16)
        depth = DepthMap(np.ones((16, 16)), np.ones((16, 16), dtype=bool))
        grid = unproject_grid(depth, cam, stride=1)
        assert np.abs(grid[:, :, 2] - 1.0).max() < 1e-12

    def test_stride1_matches_per_pixel(self):
        cam = random_camera(Stream(10), hw=8)
        depth = DepthMap(Stream(11).uniform((8, 8), 0.5, 2.0),
                         np.ones((8, 8), dtype=bool))
        grid = unproject_grid(depth, cam, stride=1)
        gx, gy = np.meshgrid(np.arange(8.0), np.arange(8.0))
        pix = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1)
        ref = unproject(pix, depth.depth.reshape(-1), cam).reshape(8, 8, 3)
        assert np.abs(grid - ref).max() < 1e-12

    def test_stride2_matches_cell_center_oracle(self):
        cam = random_camera(Stream(12), hw=8)
        depth = DepthMap(Stream(13).uniform((8, 8), 0.5, 2.0),
                         np.ones((8, 8), dtype=bool))
        grid = unproject_grid(depth, cam, stride=2)
        gx, gy = cell_center_pixels(8, 8, 2)
        from mv3d.camera import _bilinear_np
        d = _bilinear_np(depth.depth, gx.reshape(-1), gy.reshape(-1))
        pix = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1)
        ref = unproject(pix, d, cam).reshape(4, 4, 3)
        assert np.abs(grid - ref).max() < 1e-12

    def test_hole_filled_from_nearest_valid(self):
        cam = simple_camera(wh=4)
        depth = np.ones((4, 4))
        depth[1, 1] = 0.0
        valid = np.ones((4, 4), dtype=bool)
        valid[1, 1] = False
        grid = unproject_grid(DepthMap(depth, valid), cam, stride=1)
        assert np.isfinite(grid).all()
        assert np.abs(grid[1, 1, 2] - 1.0) < 1e-12

    def test_all_invalid_raises(self):
        cam = simple_camera(wh=4)
        dm = DepthMap(np.ones((4, 4)), np.zeros((4, 4), dtype=bool))
        with pytest.raises(ValueError):
            unproject_grid(dm, cam)

import math

import numpy as np
import pytest

from gpmm.errors import DataError
from gpmm.mesh import Mesh
from gpmm.render import (
    BackgroundModel,
    CameraParams,
    Pose,
    SceneParams,
    ambient_illumination,
    frame_mesh,
    image_log_likelihood,
    load_image,
    load_mask,
    load_scene,
    project,
    rasterize,
    rotation_matrix,
    save_image,
    save_mask,
    save_scene,
    sh_basis,
    shade,
    silhouette_iou,
    srgb_decode,
    srgb_encode,
)
from gpmm.synthetic import head_template

AMBIENT_GAIN = 0.282095 * math.pi * 1.0233


def tri_mesh(verts, albedo=None):
    verts = np.asarray(verts, float)
    if albedo is None:
        albedo = np.full_like(verts, 0.5)
    return Mesh(verts, np.array([[0, 2, 1]]), albedo)


def camera(w=64, h=64, focal=100.0):
    return CameraParams(focal=focal, principal=((w - 1) / 2, (h - 1) / 2),
                        width=w, height=h)


@pytest.fixture(scope="module")
def head():
    return head_template(rings=12, segments=12)[0]


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        cam = camera()
        px, z, ok = project(cam, Pose(), [[0.0, 0.0, 200.0]])
        assert ok[0]
        assert px[0, 0] == cam.principal[0]
        assert px[0, 1] == cam.principal[1]
        assert z[0] == 200.0

    def test_similar_triangles(self):
        cam = camera(focal=100.0)
        px, _, _ = project(cam, Pose(), [[10.0, 0.0, 100.0]])
        assert px[0, 0] == pytest.approx(cam.principal[0] + 10.0)

    def test_doubling_focal_doubles_offset(self):
        p = [[7.0, -3.0, 50.0]]
        a, _, _ = project(camera(focal=100.0), Pose(), p)
        b, _, _ = project(camera(focal=200.0), Pose(), p)
        ca = camera().principal
        assert (b[0] - ca) == pytest.approx(2.0 * (a[0] - ca))

    def test_y_axis_points_up(self):
        cam = camera()
        px, _, _ = project(cam, Pose(), [[0.0, 10.0, 100.0]])
        assert px[0, 1] < cam.principal[1]

    def test_behind_camera_flagged(self):
        px, _, ok = project(camera(), Pose(), [[0.0, 0.0, -5.0], [0.0, 0.0, 0.5]])
        assert not ok.any()
        assert np.isnan(px).all()

    def test_pose_applied_before_projection(self):
        pose = Pose(yaw=math.pi / 2, translation=[0.0, 0.0, 100.0])
        # yaw pi/2 sends +z to +x
        px, z, ok = project(camera(), pose, [[0.0, 0.0, 30.0]])
        assert ok[0]
        assert z[0] == pytest.approx(100.0)
        assert px[0, 0] > camera().principal[0]


class TestRotation:
    def test_yaw_sends_z_to_x(self):
        r = rotation_matrix(math.pi / 2, 0.0, 0.0)
        np.testing.assert_allclose(r @ [0, 0, 1], [1, 0, 0], atol=1e-12)

    def test_pitch_sends_y_to_z(self):
        r = rotation_matrix(0.0, math.pi / 2, 0.0)
        np.testing.assert_allclose(r @ [0, 1, 0], [0, 0, 1], atol=1e-12)

    def test_roll_sends_x_to_y(self):
        r = rotation_matrix(0.0, 0.0, math.pi / 2)
        np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_proper_rotation(self):
        r = rotation_matrix(0.3, -0.5, 1.1)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)


class TestShading:
    def test_ambient_formula(self):
        sh = np.zeros((3, 9))
        sh[:, 0] = 0.8
        albedo = np.array([0.6, 0.4, 0.2])
        for n in ([0, 0, 1], [0, 1, 0], [0.6, 0.0, -0.8]):
            got = shade(albedo, n, sh)
            np.testing.assert_allclose(got, albedo * 0.8 * AMBIENT_GAIN,
                                       rtol=1e-12)

    def test_zero_sh_is_black(self):
        got = shade([1.0, 1.0, 1.0], [0.0, 0.0, 1.0], np.zeros((3, 9)))
        np.testing.assert_array_equal(got, 0.0)

    def test_band1_flip_negates_preclamp(self):
        sh = np.zeros((3, 9))
        sh[:, 2] = 1.0  # z term
        up = shade([1.0, 1.0, 1.0], [0.0, 0.0, 1.0], sh, clamp=False)
        down = shade([1.0, 1.0, 1.0], [0.0, 0.0, -1.0], sh, clamp=False)
        np.testing.assert_allclose(down, -up, rtol=1e-12)
        assert np.all(shade([1, 1, 1], [0, 0, -1.0], sh) == 0.0)

    def test_non_unit_normal_rejected(self):
        with pytest.raises(DataError):
            shade([1, 1, 1], [0.0, 0.0, 2.0], np.zeros((3, 9)))

    def test_ambient_helper_round_trips(self):
        sh = ambient_illumination(strength=1.0)
        got = shade([0.25, 0.5, 0.75], [0.0, 1.0, 0.0], sh)
        np.testing.assert_allclose(got, [0.25, 0.5, 0.75], rtol=1e-12)

    def test_basis_shape_and_band0(self):
        b = sh_basis(np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]))
        assert b.shape == (2, 9)
        np.testing.assert_allclose(b[:, 0], AMBIENT_GAIN, rtol=1e-12)


class TestRasterize:
    def scene(self, w=64, h=64):
        return SceneParams(pose=Pose(), camera=camera(w, h),
                           illumination=ambient_illumination())

    def test_full_cover_triangle(self):
        mesh = tri_mesh([[-500, -500, 50], [500, -500, 50], [0, 900, 50]])
        out = rasterize(mesh, self.scene())
        assert out.mask.all()
        assert np.all(out.tri_id == 0)
        np.testing.assert_allclose(out.depth, 50.0)

    def test_behind_camera_empty(self):
        mesh = tri_mesh([[-500, -500, -50], [500, -500, -50], [0, 900, -50]])
        out = rasterize(mesh, self.scene())
        assert not out.mask.any()
        assert np.all(out.tri_id == -1)
        assert np.isinf(out.depth).all()

    def test_straddling_near_plane_culls_whole_triangle(self):
        mesh = tri_mesh([[-500, -500, 50], [500, -500, 50], [0, 900, -50]])
        out = rasterize(mesh, self.scene())
        assert not out.mask.any()

    def test_backface_culled(self):
        verts = np.array([[-500.0, -500, 50], [500, -500, 50], [0, 900, 50]])
        away = Mesh(verts, np.array([[0, 1, 2]]), np.full((3, 3), 0.5))
        out = rasterize(away, self.scene())
        assert not out.mask.any()

    def test_nearer_triangle_wins(self):
        verts = np.array([
            [-300.0, -300, 100], [300, -300, 100], [0, 500, 100],
            [-10.0, -10, 50], [10, -10, 50], [0, 15, 50],
        ])
        albedo = np.full((6, 3), 0.5)
        for order, near_id in (([0, 1], 1), ([1, 0], 0)):
            tris = np.array([[0, 2, 1], [3, 5, 4]])[order]
            out = rasterize(Mesh(verts, tris, albedo), self.scene())
            near = out.mask & (out.depth < 60.0)
            far = out.mask & ~near
            assert near.any() and far.any()
            assert np.all(out.tri_id[near] == near_id)
            np.testing.assert_allclose(out.depth[near], 50.0, rtol=1e-9)
            np.testing.assert_allclose(out.depth[far], 100.0, rtol=1e-9)

    def test_silhouette_is_finite_depth(self, head):
        out = rasterize(head, frame_mesh(head, 96, 96))
        np.testing.assert_array_equal(out.mask, np.isfinite(out.depth))
        assert out.mask.any()
        assert not out.mask.all()

    def test_bit_deterministic(self, head):
        scene = frame_mesh(head, 72, 72)
        a = rasterize(head, scene)
        b = rasterize(head, scene)
        for name in ("color", "depth", "bary", "pixel_normals", "pixel_albedo"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        np.testing.assert_array_equal(a.tri_id, b.tri_id)

    def test_numba_matches_numpy(self, head):
        scene = frame_mesh(head, 48, 48)
        a = rasterize(head, scene, use_numba=True)
        b = rasterize(head, scene, use_numba=False)
        np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(a.tri_id, b.tri_id)
        np.testing.assert_array_equal(a.bary, b.bary)
        np.testing.assert_array_equal(a.color, b.color)

    def test_roll_quarter_turns_keep_silhouette_area(self, head):
        base = frame_mesh(head, 96, 96)
        area0 = rasterize(head, base).silhouette_area
        for quarter in (1, 2, 3):
            rolled = base.with_pose(roll=quarter * math.pi / 2.0)
            area = rasterize(head, rolled).silhouette_area
            assert abs(area - area0) <= 0.01 * area0

    def test_frame_mesh_keeps_vertices_in_view(self, head):
        scene = frame_mesh(head, 128, 96)
        px, _, ok = project(scene.camera, scene.pose, head.vertices)
        assert ok.all()
        assert px[:, 0].min() >= 0 and px[:, 0].max() <= 127
        assert px[:, 1].min() >= 0 and px[:, 1].max() <= 95
        frac = rasterize(head, scene).mask.mean()
        assert 0.1 < frac < 0.8

    def test_normals_unit_inside_mask(self, head):
        out = rasterize(head, frame_mesh(head, 64, 64))
        norms = np.linalg.norm(out.pixel_normals[out.mask], axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)


class TestRecolorPaths:
    def test_with_illumination_matches_fresh_render(self, head):
        scene = frame_mesh(head, 64, 64)
        base = rasterize(head, scene)
        sh2 = ambient_illumination(0.5)
        sh2[:, 2] = 0.3
        fast = base.with_illumination(sh2)
        full = rasterize(head, scene.with_illumination(sh2))
        np.testing.assert_array_equal(fast.color, full.color)
        np.testing.assert_array_equal(fast.depth, full.depth)

    def test_with_albedo_matches_fresh_render(self, head):
        scene = frame_mesh(head, 64, 64)
        base = rasterize(head, scene)
        new_albedo = np.clip(head.albedo * 0.5 + 0.1, 0.0, 1.0)
        fast = base.with_albedo(new_albedo)
        full = rasterize(head.with_albedo(new_albedo), scene)
        np.testing.assert_array_equal(fast.color, full.color)
        np.testing.assert_array_equal(fast.pixel_albedo, full.pixel_albedo)


class TestBackground:
    def test_uniform_image_histogram(self):
        img = np.zeros((2, 2, 3))
        bg = BackgroundModel.from_image(img)
        lp = bg.pixel_log_prob(img)
        want = math.log((4 + 1) / (4 + 16 ** 3))
        np.testing.assert_allclose(lp, want, rtol=1e-15)
        other = bg.pixel_log_prob(np.full((1, 1, 3), 0.9))
        assert other[0, 0] == pytest.approx(math.log(1 / (4 + 16 ** 3)))

    def test_top_edge_clamped_to_last_bin(self):
        img = np.ones((1, 1, 3))
        bg = BackgroundModel.from_image(img)
        assert bg.pixel_log_prob(img)[0, 0] == pytest.approx(
            math.log(2 / (1 + 16 ** 3)))


def fake_render(color, mask):
    from gpmm.render import RenderOutput

    color = np.asarray(color, float)
    h, w = color.shape[:2]
    mask = np.asarray(mask, bool)
    depth = np.where(mask, 100.0, np.inf)
    return RenderOutput(
        color=np.where(mask[..., None], color, 0.0), depth=depth, mask=mask,
        tri_id=np.where(mask, 0, -1).astype(np.int32),
        bary=np.zeros((h, w, 3)), pixel_normals=np.zeros((h, w, 3)),
        pixel_albedo=np.zeros((h, w, 3)),
    )


def likelihood_oracle(color, mask, observed, sigma, bg):
    """Per-pixel python-loop likelihood for small images."""
    h, w = mask.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                for c in range(3):
                    r = (color[i, j, c] - observed[i, j, c]) / sigma
                    total += -0.5 * r * r - math.log(math.sqrt(2 * math.pi) * sigma)
            else:
                total += bg.pixel_log_prob(observed[i : i + 1, j : j + 1])[0, 0]
    return total


class TestImageLikelihood:
    def setup_method(self):
        rng = np.random.default_rng(12)
        self.observed = rng.uniform(0.0, 1.0, size=(4, 4, 3))
        self.bg = BackgroundModel.from_image(self.observed)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        color = rng.uniform(0.0, 1.0, size=(4, 4, 3))
        mask = np.zeros((4, 4), bool)
        mask[1:3, 1:4] = True
        got = image_log_likelihood(fake_render(color, mask), self.observed,
                                   sigma=0.043, background=self.bg)
        want = likelihood_oracle(np.where(mask[..., None], color, 0.0), mask,
                                 self.observed, 0.043, self.bg)
        assert got == pytest.approx(want, rel=1e-10)

    def test_perfect_foreground_term(self):
        mask = np.zeros((4, 4), bool)
        mask[0:2, 0:3] = True
        got = image_log_likelihood(fake_render(self.observed, mask),
                                   self.observed, sigma=0.043,
                                   background=self.bg)
        fg = 6 * 3 * math.log(1.0 / (math.sqrt(2 * math.pi) * 0.043))
        bg = float(self.bg.pixel_log_prob(self.observed)[~mask].sum())
        assert got == pytest.approx(fg + bg, rel=1e-12)

    def test_growing_matching_silhouette_raises_foreground(self):
        small = np.zeros((4, 4), bool)
        small[1, 1] = True
        large = small.copy()
        large[1, 2] = large[2, 1] = True
        l_small = image_log_likelihood(fake_render(self.observed, small),
                                       self.observed, background=self.bg)
        l_large = image_log_likelihood(fake_render(self.observed, large),
                                       self.observed, background=self.bg)
        # swapped pixels trade their background term for a zero-residual
        # foreground term, which dominates at sigma well below 1/sqrt(2 pi)
        per_pix_fg = 3 * math.log(1.0 / (math.sqrt(2 * math.pi) * 0.043))
        swapped = self.bg.pixel_log_prob(self.observed)[small ^ large]
        assert l_large - l_small == pytest.approx(
            2 * per_pix_fg - float(swapped.sum()), rel=1e-10)
        assert l_large > l_small

    def test_empty_silhouette_is_pure_background(self):
        got = image_log_likelihood(fake_render(np.zeros((4, 4, 3)),
                                               np.zeros((4, 4), bool)),
                                   self.observed, background=self.bg)
        want = float(self.bg.pixel_log_prob(self.observed).sum())
        assert got == pytest.approx(want, rel=1e-12)

    def test_maximized_by_matching_render(self):
        mask = np.zeros((4, 4), bool)
        mask[1:3, 1:3] = True
        best = image_log_likelihood(fake_render(self.observed, mask),
                                    self.observed, background=self.bg)
        rng = np.random.default_rng(7)
        for _ in range(5):
            noisy = np.clip(self.observed + rng.normal(0, 0.1, (4, 4, 3)), 0, 1)
            worse = image_log_likelihood(fake_render(noisy, mask),
                                         self.observed, background=self.bg)
            assert worse < best

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            image_log_likelihood(fake_render(np.zeros((4, 4, 3)),
                                             np.zeros((4, 4), bool)),
                                 np.zeros((5, 5, 3)), background=self.bg)

    def test_bad_sigma(self):
        with pytest.raises(DataError):
            image_log_likelihood(fake_render(np.zeros((4, 4, 3)),
                                             np.zeros((4, 4), bool)),
                                 self.observed, sigma=0.0)


class TestIoU:
    def test_identical(self):
        m = np.array([[True, False], [True, True]])
        assert silhouette_iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.array([[True, False]])
        b = np.array([[False, True]])
        assert silhouette_iou(a, b) == 0.0

    def test_half(self):
        a = np.array([[True, False]])
        b = np.array([[True, True]])
        assert silhouette_iou(a, b) == 0.5

    def test_both_empty(self):
        z = np.zeros((3, 3), bool)
        assert silhouette_iou(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            silhouette_iou(np.zeros((2, 2), bool), np.zeros((3, 3), bool))


class TestImageIO:
    def test_srgb_round_trip(self):
        vals = np.linspace(0.0, 1.0, 64).reshape(-1, 1) * np.ones((1, 3))
        np.testing.assert_allclose(srgb_decode(srgb_encode(vals)), vals,
                                   atol=1e-12)

    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.uniform(0.0, 1.0, size=(16, 16, 3))
        path = tmp_path / "img.png"
        save_image(path, img)
        back = load_image(path)
        assert np.abs(back - img).max() < 0.01  # 8-bit sRGB quantization

    def test_png_is_srgb_encoded(self, tmp_path):
        from PIL import Image

        img = np.full((4, 4, 3), 0.5)
        path = tmp_path / "gray.png"
        save_image(path, img)
        raw = np.asarray(Image.open(path))
        assert raw[0, 0, 0] == round(srgb_encode(np.array(0.5)) * 255)

    def test_mask_round_trip(self, tmp_path):
        mask = np.zeros((8, 8), bool)
        mask[2:5, 3:7] = True
        path = tmp_path / "mask.png"
        save_mask(path, mask)
        np.testing.assert_array_equal(load_mask(path), mask)

    def test_unreadable_image(self, tmp_path):
        path = tmp_path / "bad.png"
        path.write_bytes(b"not a png")
        with pytest.raises(DataError):
            load_image(path)


class TestSceneIO:
    def test_round_trip_exact(self, tmp_path, head):
        scene = frame_mesh(head, 80, 60)
        scene = scene.with_pose(yaw=3.03, pitch=-0.21, roll=0.055)
        path = tmp_path / "scene.json"
        save_scene(path, scene)
        back = load_scene(path)
        assert back.pose.yaw == scene.pose.yaw
        np.testing.assert_array_equal(back.pose.translation,
                                      scene.pose.translation)
        assert back.camera == scene.camera
        np.testing.assert_array_equal(back.illumination, scene.illumination)

    def test_not_a_scene(self, tmp_path):
        path = tmp_path / "junk.json"
        path.write_text("{\"kind\": \"other\"}")
        with pytest.raises(DataError):
            load_scene(path)
        path.write_text("pfff")
        with pytest.raises(DataError):
            load_scene(path)

    def test_validation(self):
        with pytest.raises(DataError):
            CameraParams(focal=-1.0, principal=(0, 0), width=4, height=4)
        with pytest.raises(DataError):
            CameraParams(focal=10.0, principal=(0, 0), width=0, height=4)
        with pytest.raises(DataError):
            Pose(yaw=float("nan"))
        with pytest.raises(DataError):
            SceneParams(pose=Pose(), camera=camera(),
                        illumination=np.zeros((3, 8)))

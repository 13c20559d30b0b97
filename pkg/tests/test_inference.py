import math

import numpy as np
import pytest

from gpmm.errors import DataError, FitAbortError
from gpmm.inference import (
    ChainState,
    FitConfig,
    ProposalConfig,
    _mh_accept,
    _solve_sh_from_render,
    estimate_illumination,
    fit_image,
    landmark_log_likelihood,
    quality_check_silhouette,
    recognize,
)
from gpmm.kernels import kernel_recipe
from gpmm.lowrank import (
    LatentCode,
    NystromConfig,
    build_gp_model,
    instance,
    latent_cosine,
)
from gpmm.mesh import LandmarkSet, Mesh
from gpmm.render import (
    RenderOutput,
    ambient_illumination,
    frame_mesh,
    project,
    rasterize,
)
from gpmm.synthetic import head_template


@pytest.fixture(scope="module")
def head_and_marks():
    return head_template(rings=10, segments=10)


@pytest.fixture(scope="module")
def model(head_and_marks):
    cfg = NystromConfig(shape_landmarks=92, albedo_landmarks=92,
                        shape_rank=8, albedo_rank=6)
    return build_gp_model(head_and_marks[0], kernel_recipe("standard-full"),
                          cfg, seed=3)


@pytest.fixture(scope="module")
def scene(model):
    return frame_mesh(model.mean, 48, 48)


def observations_at(scene, mesh, marks, names, sigma=4.0, offsets=None):
    entries = [(n, marks.vertex_id(n)) for n in names]
    ids = [v for _, v in entries]
    px, _, ok = project(scene.camera, scene.pose, mesh.vertices[ids])
    assert ok.all()
    obs = []
    for k, name in enumerate(names):
        dx, dy = (offsets or {}).get(name, (0.0, 0.0))
        obs.append((name, px[k, 0] + dx, px[k, 1] + dy, sigma))
    return LandmarkSet(entries, obs)


def assert_pose_equal(a, b):
    assert (a.yaw, a.pitch, a.roll) == (b.yaw, b.pitch, b.roll)
    np.testing.assert_array_equal(a.translation, b.translation)


def fake_mask_render(mask):
    mask = np.asarray(mask, bool)
    h, w = mask.shape
    return RenderOutput(
        color=np.zeros((h, w, 3)), depth=np.where(mask, 1.0, np.inf),
        mask=mask, tri_id=np.where(mask, 0, -1).astype(np.int32),
        bary=np.zeros((h, w, 3)), pixel_normals=np.zeros((h, w, 3)),
        pixel_albedo=np.zeros((h, w, 3)),
    )


class TestLandmarkLikelihood:
    names = ("nose_tip", "chin", "left_eye")

    def test_exact_projections(self, model, scene, head_and_marks):
        zeros = LatentCode.zeros(model.shape_rank, model.albedo_rank)
        lset = observations_at(scene, model.mean, head_and_marks[1], self.names)
        got = landmark_log_likelihood(scene, model, zeros, lset)
        want = 3 * 2 * math.log(1.0 / (math.sqrt(2.0 * math.pi) * 4.0))
        assert got == pytest.approx(want, rel=1e-12)

    def test_one_sigma_offset_costs_half(self, model, scene, head_and_marks):
        zeros = LatentCode.zeros(model.shape_rank, model.albedo_rank)
        exact = observations_at(scene, model.mean, head_and_marks[1], self.names)
        off = observations_at(scene, model.mean, head_and_marks[1], self.names,
                              offsets={"chin": (4.0, 0.0)})
        a = landmark_log_likelihood(scene, model, zeros, exact)
        b = landmark_log_likelihood(scene, model, zeros, off)
        assert a - b == pytest.approx(0.5, rel=1e-9)

    def test_empty_is_zero(self, model, scene):
        zeros = LatentCode.zeros(model.shape_rank, model.albedo_rank)
        assert landmark_log_likelihood(scene, model, zeros,
                                       LandmarkSet()) == 0.0

    def test_behind_camera_penalty(self, model, scene, head_and_marks):
        zeros = LatentCode.zeros(model.shape_rank, model.albedo_rank)
        lset = observations_at(scene, model.mean, head_and_marks[1], self.names)
        behind = scene.with_pose(translation=[0.0, 0.0, -500.0])
        got = landmark_log_likelihood(behind, model, zeros, lset)
        assert got == -3.0e6

    def test_unknown_vertex_rejected(self, model, scene):
        zeros = LatentCode.zeros(model.shape_rank, model.albedo_rank)
        lset = LandmarkSet(entries=[("a", 0)],
                           observations=[("b", 1.0, 2.0, 4.0)])
        with pytest.raises(DataError, match="'b'"):
            landmark_log_likelihood(scene, model, zeros, lset)


class TestEstimateIllumination:
    def test_round_trip_recovery(self, model, scene):
        sh = ambient_illumination(0.9)
        sh[:, 2] += 0.15
        sh[0, 3] += 0.1
        code = LatentCode.zeros(model.shape_rank, model.albedo_rank)
        lit = scene.with_illumination(sh)
        observed = rasterize(instance(model, code), lit).color
        got = estimate_illumination(lit, model, code, observed)
        assert np.abs(got - sh).max() / np.abs(sh).max() < 1e-3

    def test_constant_image_is_ambient_dominated(self, head_and_marks):
        mesh = head_and_marks[0].with_albedo(
            np.full_like(head_and_marks[0].albedo, 0.5))
        cfg = NystromConfig(shape_landmarks=92, albedo_landmarks=92,
                            shape_rank=4, albedo_rank=4)
        sphere = build_gp_model(mesh, kernel_recipe("standard-full"), cfg)
        scn = frame_mesh(mesh, 48, 48)
        code = LatentCode.zeros(4, 4)
        observed = np.full((48, 48, 3), 0.5)
        sh = estimate_illumination(scn, sphere, code, observed)
        for c in range(3):
            assert np.abs(sh[c, 1:]).max() < 0.05 * abs(sh[c, 0])

    def test_black_image_gives_zero(self, model, scene):
        code = LatentCode.zeros(model.shape_rank, model.albedo_rank)
        sh = estimate_illumination(scene, model, code, np.zeros((48, 48, 3)))
        np.testing.assert_allclose(sh, 0.0, atol=1e-12)

    def test_empty_silhouette_rejected(self, model, scene):
        code = LatentCode.zeros(model.shape_rank, model.albedo_rank)
        gone = scene.with_pose(translation=[1e6, 0.0, 500.0])
        with pytest.raises(DataError):
            estimate_illumination(gone, model, code, np.zeros((48, 48, 3)))

    def test_rank_deficient_warns_and_returns(self):
        # identical normals everywhere: normal matrix has rank 1
        h = w = 4
        mask = np.ones((h, w), bool)
        render = RenderOutput(
            color=np.zeros((h, w, 3)), depth=np.ones((h, w)), mask=mask,
            tri_id=np.zeros((h, w), np.int32), bary=np.zeros((h, w, 3)),
            pixel_normals=np.tile([0.0, 0.0, -1.0], (h, w, 1)),
            pixel_albedo=np.full((h, w, 3), 0.5),
        )
        with pytest.warns(RuntimeWarning, match="rank deficient"):
            sh = _solve_sh_from_render(render, np.full((h, w, 3), 0.3))
        assert np.isfinite(sh).all()

    def test_too_few_pixels(self):
        mask = np.zeros((4, 4), bool)
        mask[0, :2] = True
        with pytest.raises(DataError, match="9"):
            _solve_sh_from_render(fake_mask_render(mask), np.zeros((4, 4, 3)))


class TestMhRule:
    def test_better_always_accepted(self):
        class NeverRandom:
            def random(self):  # pragma: no cover - must not be called
                raise AssertionError("rng consulted for an uphill move")

        assert _mh_accept(NeverRandom(), 0.0)
        assert _mh_accept(NeverRandom(), 5.0)

    def test_worse_accepted_with_boltzmann_probability(self):
        rng = np.random.default_rng(0)
        n = 4000
        hits = sum(_mh_accept(rng, -1.0) for _ in range(n))
        assert abs(hits / n - math.exp(-1.0)) < 0.03


class TestFitImage:
    def observed_scene_code(self, model, scene, seed=11, scale=0.5):
        rng = np.random.default_rng(seed)
        code = LatentCode(scale * rng.standard_normal(model.shape_rank),
                          scale * rng.standard_normal(model.albedo_rank))
        image = rasterize(instance(model, code), scene).color
        return image, code

    def test_zero_steps_returns_init(self, model, scene):
        image, _ = self.observed_scene_code(model, scene)
        cfg = FitConfig(n_illumination_steps=0, n_full_steps=0, seed=5)
        best, trace = fit_image(model, image, init=scene, cfg=cfg)
        assert best.iteration == 0
        assert np.all(best.code.concatenated == 0.0)
        assert_pose_equal(best.scene.pose, scene.pose)
        np.testing.assert_array_equal(best.scene.illumination,
                                      scene.illumination)
        assert np.isfinite(best.log_posterior)
        assert trace.total_steps == 0

    def test_deterministic_per_seed(self, model, scene):
        image, _ = self.observed_scene_code(model, scene)
        cfg = FitConfig(n_illumination_steps=25, n_full_steps=50, seed=7,
                        illumination_refresh=20)
        a, _ = fit_image(model, image, init=scene, cfg=cfg)
        b, _ = fit_image(model, image, init=scene, cfg=cfg)
        assert a.log_posterior == b.log_posterior
        np.testing.assert_array_equal(a.code.concatenated,
                                      b.code.concatenated)
        assert_pose_equal(a.scene.pose, b.scene.pose)
        c, _ = fit_image(model, image, init=scene,
                         cfg=FitConfig(n_illumination_steps=25,
                                       n_full_steps=50, seed=8,
                                       illumination_refresh=20))
        assert c.log_posterior != a.log_posterior

    def test_best_history_is_monotone(self, model, scene):
        image, _ = self.observed_scene_code(model, scene)
        cfg = FitConfig(n_illumination_steps=60, n_full_steps=120, seed=1)
        best, trace = fit_image(model, image, init=scene, cfg=cfg)
        values = [v for _, v in trace.best_history]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert best.log_posterior == values[-1]

    def test_phase1_improves_posterior(self, model, scene):
        image, _ = self.observed_scene_code(model, scene)
        dim = scene.with_illumination(ambient_illumination(0.3))
        cfg = FitConfig(n_illumination_steps=80, n_full_steps=0, seed=2)
        best, trace = fit_image(model, image, init=dim, cfg=cfg)
        start = trace.best_history[0][1]
        assert best.log_posterior > start
        assert trace.phase1_state.iteration == 80

    def test_recovers_toward_ground_truth(self, head_and_marks):
        # short kernel scales keep shape modes distinct from rigid motion,
        # directional light and tight exact landmarks keep shape, albedo
        # and illumination mutually identifiable; ambient-only targets
        # leave shading unconstrained
        template, marks = head_and_marks
        cfg_n = NystromConfig(shape_landmarks=80, albedo_landmarks=60,
                              shape_rank=3, albedo_rank=3)
        recipe = kernel_recipe("standard-full",
                               shape_scales=(40.0, 20.0, 10.0),
                               albedo_position_scales=(60.0, 20.0, 2.0))
        small = build_gp_model(template, recipe, cfg_n, seed=3)
        rng = np.random.default_rng(4)
        gt_code = LatentCode(0.5 * rng.standard_normal(3),
                             0.5 * rng.standard_normal(3))
        gt_mesh = instance(small, gt_code)
        gt_scene = frame_mesh(gt_mesh, 48, 48)
        sh = ambient_illumination(0.85)
        sh[:, 2] -= 0.25
        sh[:, 3] -= 0.10
        gt_scene = gt_scene.with_illumination(sh)
        image = rasterize(gt_mesh, gt_scene).color
        lset = observations_at(gt_scene, gt_mesh, marks, marks.names,
                               sigma=0.1)
        init = gt_scene.with_pose(yaw=gt_scene.pose.yaw + math.radians(5.0))
        init = init.with_illumination(ambient_illumination())
        cfg = FitConfig(n_illumination_steps=200, n_full_steps=2000, seed=3,
                        foreground_sigma=0.1,
                        proposals=ProposalConfig(
                            angle_stds=(0.1, 0.02, 0.004),
                            translation_stds=(30.0, 6.0, 1.2),
                            log_distance_stds=(0.1, 0.02, 0.004),
                            coupled_probability=0.3))
        best, _ = fit_image(small, image, landmarks=lset, init=init, cfg=cfg)
        err_init = abs(init.pose.yaw - gt_scene.pose.yaw)
        err_best = abs(best.scene.pose.yaw - gt_scene.pose.yaw)
        assert err_best < err_init
        assert latent_cosine(best.code, gt_code) > 0.5

    def test_empty_init_silhouette_rejected(self, model, scene):
        image = np.zeros((48, 48, 3))
        gone = scene.with_pose(translation=[1e6, 0.0, 500.0])
        with pytest.raises(DataError, match="silhouette"):
            fit_image(model, image, init=gone,
                      cfg=FitConfig(n_illumination_steps=0, n_full_steps=5))

    def test_image_size_must_match_camera(self, model, scene):
        with pytest.raises(DataError):
            fit_image(model, np.zeros((32, 32, 3)), init=scene,
                      cfg=FitConfig(n_illumination_steps=0, n_full_steps=0))

    def test_abort_after_persistent_empty_proposals(self):
        verts = np.array([[-30.0, -30.0, 0.0], [30.0, -30.0, 0.0],
                          [0.0, 40.0, 0.0]])
        tri = Mesh(verts, np.array([[0, 2, 1]]), np.full((3, 3), 0.5))
        cfg_n = NystromConfig(shape_landmarks=3, albedo_landmarks=3,
                              shape_rank=2, albedo_rank=2)
        tiny = build_gp_model(tri, kernel_recipe("standard-full"), cfg_n)
        scn = frame_mesh(tiny.mean, 16, 16, yaw=0.0)
        image = rasterize(tiny.mean, scn).color
        wild = ProposalConfig(translation_stds=(1e5, 1e5, 1e5),
                              angle_stds=(3.0, 3.0, 3.0),
                              log_distance_stds=(6.0, 6.0, 6.0),
                              coefficient_stds=(1e4, 1e4, 1e4))
        cfg = FitConfig(n_illumination_steps=0, n_full_steps=4000, seed=0,
                        proposals=wild, zero_silhouette_limit=4,
                        illumination_refresh=0)
        with pytest.raises(FitAbortError) as err:
            fit_image(tiny, image, init=scn, cfg=cfg)
        assert "consecutive" in str(err.value)
        assert err.value.diagnostics["iteration"] > 0

    def test_validation(self):
        with pytest.raises(DataError):
            FitConfig(n_illumination_steps=-1)
        with pytest.raises(DataError):
            ProposalConfig(scale_probs=(0.5, 0.5, 0.5))
        with pytest.raises(DataError):
            ProposalConfig(angle_stds=(0.1, 0.2))
        with pytest.raises(DataError):
            ProposalConfig(translation_stds=(1.0, -2.0, 3.0))
        with pytest.raises(DataError):
            ProposalConfig(joint_probability=1.5)
        with pytest.raises(DataError):
            ProposalConfig(coupled_probability=-0.1)
        with pytest.raises(DataError):
            ProposalConfig(coupled_start=2.0)


class TestQualityCheck:
    def test_identical_passes(self):
        m = np.zeros((4, 4), bool)
        m[1:3, 1:3] = True
        assert quality_check_silhouette(fake_mask_render(m),
                                        fake_mask_render(m))

    def test_half_iou_fails(self):
        a = np.zeros((2, 2), bool)
        a[0, 0] = True
        b = a.copy()
        b[0, 1] = True
        assert not quality_check_silhouette(fake_mask_render(a),
                                            fake_mask_render(b))

    def test_boundary_is_inclusive(self):
        a = np.zeros((1, 8), bool)
        a[0, :5] = True
        b = np.zeros((1, 8), bool)
        b[0, :8] = True
        # IoU = 5/8 = 0.625 exactly
        assert quality_check_silhouette(fake_mask_render(a),
                                        fake_mask_render(b), 0.625)


class TestRecognize:
    def codes(self, rng, n, dim=6):
        return [LatentCode(rng.normal(size=dim), rng.normal(size=dim))
                for _ in range(n)]

    def test_gallery_contains_probe(self):
        rng = np.random.default_rng(0)
        codes = self.codes(rng, 4)
        gallery = list(zip("abcd", codes))
        assert recognize(codes[2], gallery) == "c"

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        codes = self.codes(rng, 3)
        gallery = list(zip(range(3), codes))
        doubled = LatentCode(2.0 * codes[1].shape, 2.0 * codes[1].albedo)
        assert recognize(doubled, gallery) == 1

    def test_tie_goes_to_lowest_id(self):
        v = LatentCode([1.0, 0.0], [0.0])
        assert recognize(v, [(2, v.copy()), (1, v.copy())]) == 1
        assert recognize(v, [("b", v.copy()), ("a", v.copy())]) == "a"

    def test_zero_pad_invariance(self):
        rng = np.random.default_rng(2)
        codes = self.codes(rng, 3)
        gallery = list(zip(range(3), codes))
        probe = codes[0]
        base = recognize(probe, gallery)
        pad = lambda c: LatentCode(np.concatenate([c.shape, [0.0, 0.0]]),
                                   c.albedo)
        padded = recognize(pad(probe), [(i, pad(c)) for i, c in gallery])
        assert base == padded

    def test_empty_gallery(self):
        with pytest.raises(DataError):
            recognize(LatentCode([1.0], [1.0]), [])

"""Analysis-by-synthesis fitting of scene and latent code to a photo.

A Metropolis-Hastings chain with symmetric Gaussian drift proposals runs in
two phases: illumination only (phase 1), then all parameter blocks
(phase 2) with a periodic closed-form illumination refresh. The posterior
combines the render likelihood, an optional landmark term, the
standard-normal latent prior, and a canonical scene prior centered on the
initial scene. Camera distance is treated in log space throughout so its
drift proposal stays symmetric.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, FitAbortError
from .lowrank import LatentCode, MorphableModel, instance, latent_cosine, log_prior
from .mesh import LandmarkSet, Mesh
from .render import (
    BackgroundModel,
    RenderOutput,
    SceneParams,
    ambient_illumination,
    frame_mesh,
    image_log_likelihood,
    project,
    rasterize,
    rotation_matrix,
    sh_basis,
    silhouette_iou,
)
from .rng import substream

LANDMARK_BEHIND_PENALTY = -1.0e6
DEFAULT_SILHOUETTE_IOU = 0.625

_BLOCKS = ("pose", "translation", "distance", "shape", "albedo", "sh")
_GEOMETRY_BLOCKS = frozenset({"pose", "translation", "distance", "shape"})


@dataclass(frozen=True)
class ProposalConfig:
    """Gaussian drift stds per block, coarse to fine, plus scale mixture.

    Multi-dimensional blocks mix joint drift (all entries at once, with
    probability joint_probability) with single-coordinate drift, which
    mixes far better once the likelihood tightens. Geometry blocks further
    mix in coupled moves (probability coupled_probability) that shift pose
    or translation together with the shape coefficients that mimic the
    same rigid motion: smooth kernels express near-rigid deformations, so
    geometry and shape trade off along image-flat directions that plain
    per-block drift crosses too slowly. All variants stay symmetric since
    move selection and coupling directions never depend on the state.
    """

    angle_stds: tuple = (0.1, 0.03, 0.01)
    translation_stds: tuple = (30.0, 10.0, 3.0)
    log_distance_stds: tuple = (0.1, 0.03, 0.01)
    coefficient_stds: tuple = (0.2, 0.05, 0.01)
    sh_stds: tuple = (0.1, 0.03, 0.01)
    scale_probs: tuple = (0.2, 0.3, 0.5)
    joint_probability: float = 0.25
    coupled_probability: float = 0.5
    coupled_start: float = 0.5

    def __post_init__(self):
        ladders = {
            "angle_stds": self.angle_stds,
            "translation_stds": self.translation_stds,
            "log_distance_stds": self.log_distance_stds,
            "coefficient_stds": self.coefficient_stds,
            "sh_stds": self.sh_stds,
        }
        n = len(self.scale_probs)
        for name, ladder in ladders.items():
            vals = tuple(float(v) for v in ladder)
            if len(vals) != n:
                raise DataError(
                    f"{name} has {len(vals)} scales, mixture has {n}"
                )
            if any(not (v > 0 and np.isfinite(v)) for v in vals):
                raise DataError(f"{name} must be positive, got {vals}")
            object.__setattr__(self, name, vals)
        probs = tuple(float(p) for p in self.scale_probs)
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise DataError(f"scale probabilities must sum to 1, got {probs}")
        object.__setattr__(self, "scale_probs", probs)
        for name in ("joint_probability", "coupled_probability",
                     "coupled_start"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise DataError(f"{name} {p} outside [0, 1]")


@dataclass(frozen=True)
class FitConfig:
    n_illumination_steps: int = 1000
    n_full_steps: int = 10000
    landmark_sigma: float = 4.0
    foreground_sigma: float = 0.043
    background_bins: int = 16
    illumination_refresh: int = 500
    zero_silhouette_limit: int = 1000
    seed: int = 0
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    angle_prior_std: float = math.radians(30.0)
    translation_prior_std: float = 100.0
    log_distance_prior_std: float = 0.3
    sh_prior_std: float = 2.0

    def __post_init__(self):
        if self.n_illumination_steps < 0 or self.n_full_steps < 0:
            raise DataError("step counts must be nonnegative")
        if self.landmark_sigma <= 0 or self.foreground_sigma <= 0:
            raise DataError("likelihood stds must be positive")


@dataclass(frozen=True)
class ChainState:
    scene: SceneParams
    code: LatentCode
    log_posterior: float
    iteration: int


@dataclass
class FitTrace:
    """Summary of one chain: phase boundary state and acceptance counters."""

    phase1_state: ChainState = None
    proposed: dict = field(default_factory=dict)
    accepted: dict = field(default_factory=dict)
    best_history: list = field(default_factory=list)
    zero_silhouette_rejects: int = 0
    illumination_refreshes: int = 0
    refresh_improvements: int = 0
    total_steps: int = 0


def _norm_logpdf(x, mu, std) -> float:
    z = (np.asarray(x, np.float64) - mu) / std
    return float(np.sum(-0.5 * z * z - np.log(math.sqrt(2.0 * math.pi) * std)))


def landmark_log_likelihood(scene: SceneParams, model: MorphableModel,
                            code: LatentCode, observed: LandmarkSet) -> float:
    """Isotropic 2D Gaussian landmark term; empty observations give 0.

    A landmark vertex behind the camera contributes a fixed -1e6 penalty.
    """
    if not observed.observations:
        return 0.0
    mesh = instance(model, code)
    return _landmark_term(scene, mesh, observed)


def _landmark_term(scene: SceneParams, mesh: Mesh,
                   observed: LandmarkSet) -> float:
    ids, targets, sigmas = [], [], []
    for name, x, y, sigma in observed.observations:
        try:
            vid = observed.vertex_id(name)
        except KeyError:
            raise DataError(
                f"landmark {name!r} has no template vertex"
            ) from None
        if vid >= mesh.n_vertices:
            raise DataError(
                f"landmark {name!r} maps to vertex {vid}, "
                f"mesh has {mesh.n_vertices}"
            )
        ids.append(vid)
        targets.append((x, y))
        sigmas.append(sigma)
    pixels, _, ok = project(scene.camera, scene.pose, mesh.vertices[ids])
    total = 0.0
    for k in range(len(ids)):
        if not ok[k]:
            total += LANDMARK_BEHIND_PENALTY
            continue
        sigma = sigmas[k]
        dx = pixels[k, 0] - targets[k][0]
        dy = pixels[k, 1] - targets[k][1]
        total += -0.5 * (dx * dx + dy * dy) / (sigma * sigma)
        total += -2.0 * math.log(math.sqrt(2.0 * math.pi) * sigma)
    return float(total)


# -- closed-form illumination -------------------------------------------------


def _solve_sh_from_render(render: RenderOutput, observed: np.ndarray) -> np.ndarray:
    mask = render.mask
    count = int(mask.sum())
    if count == 0:
        raise DataError("cannot estimate illumination from an empty silhouette")
    if count < 9:
        raise DataError(
            f"need at least 9 visible pixels to estimate illumination, got {count}"
        )
    basis = sh_basis(render.pixel_normals[mask])  # (p, 9)
    albedo = render.pixel_albedo[mask]
    target = observed[mask]
    sh = np.zeros((3, 9))
    for c in range(3):
        a = basis * albedo[:, c : c + 1]
        g = a.T @ a
        b = a.T @ target[:, c]
        eigs = np.linalg.eigvalsh(g)
        if eigs[-1] <= 0.0 or eigs[0] <= 1e-12 * eigs[-1]:
            ridge = 1e-6 * float(np.trace(g))
            if ridge <= 0.0:
                ridge = 1e-12
            warnings.warn(
                "illumination normal matrix is rank deficient; "
                f"using ridge {ridge:g} on channel {c}",
                RuntimeWarning,
                stacklevel=3,
            )
            g = g + ridge * np.eye(9)
        sh[c] = np.linalg.solve(g, b)
    return sh


def estimate_illumination(scene: SceneParams, model: MorphableModel,
                          code: LatentCode, observed) -> np.ndarray:
    """Per-channel least-squares SH coefficients over visible pixels."""
    observed = np.asarray(observed, dtype=np.float64)
    render = rasterize(instance(model, code), scene)
    if observed.shape[:2] != render.mask.shape:
        raise DataError(
            f"observed image is {observed.shape[:2]}, "
            f"render is {render.mask.shape}"
        )
    return _solve_sh_from_render(render, observed)


# -- the chain ----------------------------------------------------------------


def _scene_log_prior(scene: SceneParams, init: SceneParams,
                     cfg: FitConfig) -> float:
    t = scene.pose.translation
    if t[2] <= 0.0:
        return -np.inf
    lp = _norm_logpdf(scene.pose.yaw, init.pose.yaw, cfg.angle_prior_std)
    lp += _norm_logpdf(scene.pose.pitch, init.pose.pitch, cfg.angle_prior_std)
    lp += _norm_logpdf(scene.pose.roll, init.pose.roll, cfg.angle_prior_std)
    t0 = init.pose.translation
    lp += _norm_logpdf(t[0], t0[0], cfg.translation_prior_std)
    lp += _norm_logpdf(t[1], t0[1], cfg.translation_prior_std)
    lp += _norm_logpdf(math.log(t[2]), math.log(t0[2]),
                       cfg.log_distance_prior_std)
    lp += _norm_logpdf(scene.illumination, ambient_illumination(),
                       cfg.sh_prior_std)
    return lp


def _mh_accept(rng, log_ratio: float) -> bool:
    if log_ratio >= 0.0:
        return True
    return math.log(rng.random()) < log_ratio


def _drift(rng, values, std, joint_probability):
    """Symmetric drift on a flat vector: joint or single random entry."""
    out = np.array(values, dtype=np.float64)
    if out.size == 1 or rng.random() < joint_probability:
        out += std * rng.standard_normal(out.size)
    else:
        k = rng.integers(out.size)
        out[k] += std * rng.standard_normal()
    return out


@dataclass(frozen=True)
class _ValleyMoves:
    """Shape-code directions mimicking small rigid motions of the head.

    Rows of directions: camera-frame x/y/z translation (per mm) and
    yaw/pitch/roll (per radian), linearized at the initial pose. Frozen at
    chain start so coupled proposals remain symmetric.
    """

    directions: np.ndarray  # (6, shape_rank)
    z_init: float


def _rigid_code_directions(model: MorphableModel,
                           init: SceneParams) -> _ValleyMoves:
    comp = model.shape.components
    scale = np.sqrt(model.shape.eigenvalues)
    verts = model.mean.vertices
    n = len(verts)
    r0 = rotation_matrix(init.pose.yaw, init.pose.pitch, init.pose.roll)

    def mimic(field):
        return (comp.T @ field.ravel()) / scale

    dirs = np.zeros((6, model.shape_rank))
    for axis in range(3):
        # head-frame direction whose rotated image is the camera axis
        dirs[axis] = mimic(np.tile(r0.T[:, axis], (n, 1)))
    eps = 1e-6
    base = np.array([init.pose.yaw, init.pose.pitch, init.pose.roll])
    for k in range(3):
        bumped = base.copy()
        bumped[k] += eps
        dr = (rotation_matrix(*bumped) - r0) / eps
        dirs[3 + k] = mimic(verts @ (r0.T @ dr).T)
    return _ValleyMoves(dirs, float(init.pose.translation[2]))


def _coupled_shape(code: LatentCode, valley: _ValleyMoves, row: int,
                   delta: float) -> LatentCode:
    shape = code.shape - delta * valley.directions[row]
    return LatentCode(shape, code.albedo)


def _propose(rng, scene: SceneParams, code: LatentCode, block: str,
             cfg: ProposalConfig, scale: int, valley: _ValleyMoves = None):
    jp = cfg.joint_probability
    # no coupling at the coarsest scale: big image-neutral moves would let
    # the chain diffuse far along the flat direction before anything pulls
    coupled = (valley is not None
               and block in ("pose", "translation", "distance")
               and scale >= 1
               and rng.random() < cfg.coupled_probability)
    if block == "pose":
        if coupled:
            k = int(rng.integers(3))
            delta = cfg.angle_stds[scale] * rng.standard_normal()
            angles = [scene.pose.yaw, scene.pose.pitch, scene.pose.roll]
            angles[k] += delta
            return scene.with_pose(
                yaw=angles[0], pitch=angles[1], roll=angles[2],
            ), _coupled_shape(code, valley, 3 + k, delta)
        angles = _drift(rng, (scene.pose.yaw, scene.pose.pitch,
                              scene.pose.roll), cfg.angle_stds[scale], jp)
        return scene.with_pose(
            yaw=angles[0], pitch=angles[1], roll=angles[2]), code
    if block == "translation":
        t = scene.pose.translation.copy()
        if coupled:
            k = int(rng.integers(2))
            delta = cfg.translation_stds[scale] * rng.standard_normal()
            t[k] += delta
            return (scene.with_pose(translation=t),
                    _coupled_shape(code, valley, k, delta))
        t[:2] = _drift(rng, t[:2], cfg.translation_stds[scale], jp)
        return scene.with_pose(translation=t), code
    if block == "distance":
        t = scene.pose.translation.copy()
        if coupled:
            delta = (cfg.log_distance_stds[scale] * valley.z_init
                     * rng.standard_normal())
            t[2] += delta
            return (scene.with_pose(translation=t),
                    _coupled_shape(code, valley, 2, delta))
        std = cfg.log_distance_stds[scale]
        t[2] = math.exp(math.log(t[2]) + std * rng.standard_normal())
        return scene.with_pose(translation=t), code
    if block == "shape":
        shape = _drift(rng, code.shape, cfg.coefficient_stds[scale], jp)
        return scene, LatentCode(shape, code.albedo)
    if block == "albedo":
        albedo = _drift(rng, code.albedo, cfg.coefficient_stds[scale], jp)
        return scene, LatentCode(code.shape, albedo)
    if block == "sh":
        flat = _drift(rng, scene.illumination.ravel(), cfg.sh_stds[scale], jp)
        return scene.with_illumination(flat.reshape(3, 9)), code
    raise DataError(f"unknown proposal block {block!r}")


def fit_image(model: MorphableModel, image, landmarks: LandmarkSet = None,
              init: SceneParams = None, cfg: FitConfig = None):
    """MAP fit of scene parameters and latent code to one image.

    Returns (best ChainState, FitTrace). Deterministic per cfg.seed.
    """
    cfg = cfg or FitConfig()
    observed = np.asarray(image, dtype=np.float64)
    if observed.ndim != 3 or observed.shape[2] != 3:
        raise DataError(f"expected an (h, w, 3) image, got {observed.shape}")
    if init is None:
        init = frame_mesh(model.mean, observed.shape[1], observed.shape[0])
    if (init.camera.height, init.camera.width) != observed.shape[:2]:
        raise DataError(
            f"camera is {init.camera.width}x{init.camera.height}, "
            f"image is {observed.shape[1]}x{observed.shape[0]}"
        )
    if init.pose.translation[2] <= 0.0:
        raise DataError("initial camera distance must be positive")
    if landmarks is not None and landmarks.observations:
        landmarks.validate_against(model.mean)
    else:
        landmarks = None

    background = BackgroundModel.from_image(observed, cfg.background_bins)
    rng = substream(cfg.seed, "fit")
    prop = cfg.proposals
    blocks = _BLOCKS
    valley = _rigid_code_directions(model, init)

    scene = init
    code = LatentCode.zeros(model.shape_rank, model.albedo_rank)
    mesh = instance(model, code)
    render = rasterize(mesh, scene)
    if not render.mask.any():
        raise DataError("initial scene renders an empty silhouette")

    def img_ll(r):
        return image_log_likelihood(r, observed, cfg.foreground_sigma,
                                    background)

    def lm_ll(s, m):
        return _landmark_term(s, m, landmarks) if landmarks else 0.0

    parts = {
        "img": img_ll(render),
        "lm": lm_ll(scene, mesh),
        "code": log_prior(code),
        "scene": _scene_log_prior(scene, init, cfg),
    }
    total = sum(parts.values())
    best = ChainState(scene, code.copy(), total, 0)
    trace = FitTrace()
    trace.best_history.append((0, total))
    consecutive_empty = 0
    iteration = 0

    def consider(new_scene, new_code, new_mesh, new_render, block):
        nonlocal scene, code, mesh, render, parts, total, best
        nonlocal consecutive_empty
        trace.proposed[block] = trace.proposed.get(block, 0) + 1
        if not new_render.mask.any():
            consecutive_empty += 1
            if consecutive_empty >= cfg.zero_silhouette_limit:
                raise FitAbortError(
                    "chain lost the silhouette: "
                    f"{consecutive_empty} consecutive empty proposals",
                    diagnostics={
                        "iteration": iteration,
                        "block": block,
                        "best_log_posterior": best.log_posterior,
                    },
                )
            return
        consecutive_empty = 0
        new_parts = dict(parts)
        new_parts["img"] = img_ll(new_render)
        if block in _GEOMETRY_BLOCKS:
            new_parts["lm"] = lm_ll(new_scene, new_mesh)
        if new_code is not code:
            new_parts["code"] = log_prior(new_code)
        if block in ("pose", "translation", "distance", "sh", "refresh"):
            new_parts["scene"] = _scene_log_prior(new_scene, init, cfg)
        new_total = sum(new_parts.values())
        if block == "refresh":
            accept = new_total > total
            trace.illumination_refreshes += 1
            if accept:
                trace.refresh_improvements += 1
        else:
            accept = _mh_accept(rng, new_total - total)
        if accept:
            trace.accepted[block] = trace.accepted.get(block, 0) + 1
            scene, code, mesh, render = new_scene, new_code, new_mesh, new_render
            parts, total = new_parts, new_total
            if new_total > best.log_posterior:
                best = ChainState(scene, code.copy(), new_total, iteration)

    def step(block, scale, moves=None):
        new_scene, new_code = _propose(rng, scene, code, block, prop, scale,
                                       moves)
        if block in ("pose", "translation", "distance"):
            new_mesh = mesh if new_code is code else instance(model, new_code)
            new_render = rasterize(new_mesh, new_scene)
        elif block == "shape":
            new_mesh = instance(model, new_code)
            new_render = rasterize(new_mesh, new_scene)
        elif block == "albedo":
            albedo = np.clip(
                model.mean.albedo + model.albedo.displacement(new_code.albedo),
                0.0, 1.0,
            )
            new_mesh = mesh.with_albedo(albedo)
            new_render = render.with_albedo(albedo)
        else:  # sh
            new_mesh = mesh
            new_render = render.with_illumination(new_scene.illumination)
        consider(new_scene, new_code, new_mesh, new_render, block)

    scale_probs = np.asarray(prop.scale_probs)
    for _ in range(cfg.n_illumination_steps):
        iteration += 1
        scale = int(rng.choice(len(scale_probs), p=scale_probs))
        step("sh", scale)
        if iteration % 50 == 0:
            trace.best_history.append((iteration, best.log_posterior))

    trace.phase1_state = ChainState(scene, code.copy(), total, iteration)

    coupled_from = prop.coupled_start * cfg.n_full_steps
    for k in range(cfg.n_full_steps):
        iteration += 1
        block = blocks[int(rng.integers(len(blocks)))]
        scale = int(rng.choice(len(scale_probs), p=scale_probs))
        step(block, scale, valley if k >= coupled_from else None)
        if cfg.illumination_refresh > 0 and (k + 1) % cfg.illumination_refresh == 0:
            if render.mask.sum() >= 9:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    sh = _solve_sh_from_render(render, observed)
                consider(scene.with_illumination(sh), code, mesh,
                         render.with_illumination(sh), "refresh")
        if iteration % 50 == 0:
            trace.best_history.append((iteration, best.log_posterior))

    trace.total_steps = iteration
    trace.best_history.append((iteration, best.log_posterior))
    return best, trace


def quality_check_silhouette(fit_render: RenderOutput,
                             ref_render: RenderOutput,
                             threshold: float = DEFAULT_SILHOUETTE_IOU) -> bool:
    """Inclusive IoU gate between two silhouettes."""
    return silhouette_iou(fit_render.mask, ref_render.mask) >= threshold


def recognize(probe: LatentCode, gallery) -> object:
    """Identity whose latent has the highest cosine similarity to the probe.

    gallery: iterable of (identity, LatentCode); ties keep the earliest.
    """
    gallery = list(gallery)
    if not gallery:
        raise DataError("empty gallery")
    best_id, best_sim = None, -np.inf
    for identity, code in gallery:
        sim = latent_cosine(probe, code)
        if sim > best_sim:
            best_id, best_sim = identity, sim
        elif sim == best_sim:
            try:
                lower = identity < best_id
            except TypeError:
                lower = False
            if lower:
                best_id = identity
    return best_id

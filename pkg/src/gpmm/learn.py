"""Model refinement from 2D images: fit, screen, denoise, align, rebuild.

One iteration fits every image, keeps only fits that preserve their
silhouette and stay within an albedo-drift budget that tightens each
iteration, cleans shape spikes, rigidly aligns the surviving meshes and
rebuilds the model by PCA. The loop can start from a deliberately poor
model and walk toward the distribution that generated the images.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .inference import FitConfig, fit_image
from .lowrank import MorphableModel, instance, save_model
from .mesh import LandmarkSet, Mesh, vertex_adjacency
from .registration import apply_rigid, build_pca_model, umeyama_align
from .render import (BackgroundModel, SceneParams, frame_mesh,
                     image_log_likelihood, rasterize, silhouette_iou)

ALBEDO_UNIT = 255.0  # drift thresholds are in 8-bit color units


@dataclass(frozen=True)
class LearnConfig:
    """Thresholds and bookkeeping for the rebuild loop.

    silhouette_iou_min is the fraction of silhouette overlap a fit must
    keep against its phase-boundary render. albedo_drift_base and
    albedo_drift_decay set the per-iteration albedo budget
    base - n * decay (8-bit color units). Spike displacements beyond
    denoise_threshold (mm) are flattened to the 1-ring average.
    """

    iterations: int = 1
    silhouette_iou_min: float = 0.625
    albedo_drift_base: float = 8.0
    albedo_drift_decay: float = 0.5
    denoise_threshold: float = 10.0
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if not 0.0 < self.silhouette_iou_min <= 1.0:
            raise DataError("silhouette_iou_min must be in (0, 1]")
        if self.albedo_drift_base <= 0:
            raise DataError("albedo_drift_base must be positive")
        if self.albedo_drift_decay < 0:
            raise DataError("albedo_drift_decay must be nonnegative")
        if self.iterations < 1:
            raise DataError("iterations must be at least 1")
        if self.denoise_threshold <= 0:
            raise DataError("denoise_threshold must be positive")

    def albedo_drift_threshold(self, iteration: int) -> float:
        return self.albedo_drift_base - iteration * self.albedo_drift_decay


@dataclass
class LearnImage:
    """One training observation: pixels plus optional hints.

    landmarks carry 2D observations tied to template vertices; init fixes
    the starting scene. With neither, fitting falls back to a coarse yaw
    grid search.
    """

    pixels: np.ndarray
    landmarks: LandmarkSet = None
    init: SceneParams = None
    name: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"expected (h, w, 3) pixels, got {self.pixels.shape}")


@dataclass
class IterationReport:
    attempted: int = 0
    passed_silhouette: int = 0
    passed_albedo_drift: int = 0
    used_for_pca: int = 0
    iteration: int = 0
    albedo_threshold: float = 0.0
    failed: bool = False
    model_path: str = ""
    images: list = field(default_factory=list)

    def __post_init__(self):
        self.validate_counts()

    def validate_counts(self):
        ok = (self.used_for_pca <= self.passed_albedo_drift
              <= self.passed_silhouette <= self.attempted)
        if not ok:
            raise DataError("QC counts must be nonincreasing along the pipeline")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def denoise_shape(mesh: Mesh, spike_threshold: float) -> Mesh:
    """Flatten vertices further than spike_threshold from their 1-ring mean.

    Single synchronous pass: every average is computed on the input
    positions, so the output does not depend on vertex order.
    """
    if spike_threshold <= 0:
        raise DataError("spike threshold must be positive")
    if not np.isfinite(spike_threshold):
        return mesh.copy()
    verts = mesh.vertices.copy()
    for i, neigh in enumerate(vertex_adjacency(mesh)):
        if len(neigh) == 0:
            continue
        center = mesh.vertices[neigh].mean(axis=0)
        if np.linalg.norm(mesh.vertices[i] - center) > spike_threshold:
            verts[i] = center
    return mesh.with_vertices(verts)


_SIDE_SWAP = (("left_", "right_"), ("right_", "left_"))


def _mirror_name(name: str) -> str:
    for prefix, repl in _SIDE_SWAP:
        if name.startswith(prefix):
            return repl + name[len(prefix):]
    return name


def _mirror_landmarks(landmarks: LandmarkSet, width: int) -> LandmarkSet:
    obs = [(_mirror_name(n), width - 1.0 - x, y, s)
           for n, x, y, s in landmarks.observations]
    known = {n for n, _ in landmarks.entries}
    dropped = [o for o in obs if o[0] not in known]
    if dropped:
        names = sorted({o[0] for o in dropped})
        raise DataError(
            f"mirrored landmark names missing from the template: {names}")
    return LandmarkSet(entries=list(landmarks.entries), observations=obs)


def flip_augment(images) -> list:
    """Originals plus left-right mirrored copies.

    Mirrored landmarks swap left_/right_ name prefixes and reflect x;
    mirrored inits negate yaw about the frontal direction, flip roll and
    the lateral offset.
    """
    out = list(images)
    for img in images:
        pixels = np.ascontiguousarray(img.pixels[:, ::-1])
        landmarks = None
        if img.landmarks is not None and img.landmarks.observations:
            landmarks = _mirror_landmarks(img.landmarks, img.pixels.shape[1])
        init = None
        if img.init is not None:
            pose = img.init.pose
            t = pose.translation * np.array([-1.0, 1.0, 1.0])
            init = img.init.with_pose(yaw=2.0 * np.pi - pose.yaw,
                                      roll=-pose.roll, translation=t)
        out.append(LearnImage(pixels, landmarks, init,
                              name=img.name + "~flip" if img.name else ""))
    return out


def _grid_init(model, pixels, cfg: FitConfig) -> SceneParams:
    """Coarse yaw scan around frontal, scored by image likelihood."""
    h, w = pixels.shape[:2]
    base = frame_mesh(model.mean, w, h)
    background = BackgroundModel.from_image(pixels, cfg.background_bins)
    best, best_ll = base, -np.inf
    for yaw_off in np.deg2rad(np.arange(-45.0, 46.0, 15.0)):
        scene = base.with_pose(yaw=base.pose.yaw + yaw_off)
        render = rasterize(model.mean, scene)
        ll = image_log_likelihood(render, pixels, cfg.foreground_sigma,
                                  background)
        if ll > best_ll:
            best, best_ll = scene, ll
    return best


def _albedo_drift(model, phase1_code, final_code) -> float:
    a = instance(model, phase1_code).albedo
    b = instance(model, final_code).albedo
    return ALBEDO_UNIT * float(np.mean(np.linalg.norm(a - b, axis=1)))


def learn_iteration(model: MorphableModel, images, cfg: LearnConfig,
                    iteration: int = 0):
    """One fit/screen/rebuild pass; returns (new or old model, report).

    A fit survives when its final silhouette overlaps its phase-boundary
    silhouette by at least silhouette_iou_min and its albedo moved less
    than the iteration's drift budget. Surviving meshes are denoised,
    aligned to the first survivor and fed to PCA. Fewer than 2 survivors
    fail the iteration and the incoming model is returned unchanged.
    """
    report = IterationReport(
        iteration=iteration,
        albedo_threshold=cfg.albedo_drift_threshold(iteration))
    survivors = []
    for idx, img in enumerate(images):
        if not isinstance(img, LearnImage):
            img = LearnImage(np.asarray(img))
        report.attempted += 1
        entry = {"name": img.name or f"image-{idx:03d}"}
        init = img.init
        if init is None and img.landmarks is None:
            init = _grid_init(model, img.pixels, cfg.fit)
        try:
            best, trace = fit_image(model, img.pixels,
                                    landmarks=img.landmarks,
                                    init=init, cfg=cfg.fit)
        except DataError as exc:
            entry["error"] = str(exc)
            report.images.append(entry)
            continue

        final_mesh = instance(model, best.code)
        final_mask = rasterize(final_mesh, best.scene).mask
        ref_state = trace.phase1_state
        ref_mask = rasterize(instance(model, ref_state.code),
                             ref_state.scene).mask
        entry["silhouette_iou"] = iou = silhouette_iou(final_mask, ref_mask)
        if iou < cfg.silhouette_iou_min:
            entry["rejected"] = "silhouette"
            report.images.append(entry)
            continue
        report.passed_silhouette += 1

        entry["albedo_drift"] = drift = _albedo_drift(
            model, ref_state.code, best.code)
        entry["albedo_drift_basis"] = "phase-boundary fit vs final fit"
        if drift >= report.albedo_threshold:
            entry["rejected"] = "albedo-drift"
            report.images.append(entry)
            continue
        report.passed_albedo_drift += 1

        entry["used"] = True
        report.images.append(entry)
        survivors.append(denoise_shape(final_mesh, cfg.denoise_threshold))

    if len(survivors) < 2:
        report.failed = True
        report.validate_counts()
        return model, report

    anchor = survivors[0]
    aligned = [anchor]
    for mesh in survivors[1:]:
        rot, t = umeyama_align(mesh.vertices, anchor.vertices)
        aligned.append(apply_rigid(mesh, rot, t))
    report.used_for_pca = len(aligned)
    report.validate_counts()
    new_model = build_pca_model(aligned)
    new_model.provenance.update({"learned_iteration": iteration})
    return new_model, report


def run_learning(model: MorphableModel, images, cfg: LearnConfig,
                 out_dir) -> list:
    """Run cfg.iterations passes, writing versioned models and reports.

    A failed iteration writes its report but no model file, and later
    iterations continue from the last good model. Returns the reports.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    current = model
    for n in range(cfg.iterations):
        t0 = time.time()
        new_model, report = learn_iteration(current, images, cfg, iteration=n)
        if not report.failed:
            path = out / f"model-iter-{n + 1:03d}.npz"
            save_model(new_model, path)
            report.model_path = str(path)
            current = new_model
        report_path = out / f"report-iter-{n + 1:03d}.json"
        body = json.loads(report.to_json())
        body["seconds"] = round(time.time() - t0, 3)
        report_path.write_text(json.dumps(body, indent=2, sort_keys=True))
        reports.append(report)
    return reports

"""Software renderer: pinhole camera, SH-lit z-buffer rasterizer, likelihoods.

Conventions, fixed across the package:

* Camera sits at the origin looking along +z with y up. A point at
  camera-space (x, y, z), z > 0, lands on pixel
  u = cx + focal * x / z, v = cy - focal * y / z.
* Pose maps template to camera space: p_cam = R @ p + t with
  R = Rz(roll) @ Rx(pitch) @ Ry(yaw). The synthetic head faces its own +z,
  so framing a frontal view uses yaw = pi (frame_mesh does this).
* Illumination is a 3x9 array of order-2 real SH coefficients per RGB
  channel, evaluated on camera-space normals with the Lambertian band
  constants baked into the basis.
* Color math is linear RGB; PNG files are 8-bit sRGB.
"""

import io
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from ._raster import fill_triangles
from .errors import DataError
from .mesh import Mesh, vertex_normals
from .meshfile import _atomic_write

NEAR_PLANE = 1.0  # mm
SH_BAND_FACTORS = (math.pi * 1.0233, 2.0 * math.pi / 3.0, math.pi / 4.0)
_SH_Y0 = 0.282095
DEFAULT_FOREGROUND_STD = 0.043
DEFAULT_HISTOGRAM_BINS = 16
SCENE_VERSION = 1


# -- scene parameters -------------------------------------------------------


@dataclass(frozen=True)
class CameraParams:
    focal: float
    principal: tuple
    width: int
    height: int

    def __post_init__(self):
        if not (np.isfinite(self.focal) and self.focal > 0):
            raise DataError(f"focal length must be positive, got {self.focal}")
        cx, cy = self.principal
        if not (np.isfinite(cx) and np.isfinite(cy)):
            raise DataError("principal point must be finite")
        object.__setattr__(self, "principal", (float(cx), float(cy)))
        object.__setattr__(self, "focal", float(self.focal))
        if self.width < 1 or self.height < 1:
            raise DataError(
                f"image size must be at least 1x1, got {self.width}x{self.height}"
            )
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))


@dataclass(frozen=True)
class Pose:
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    translation: np.ndarray = (0.0, 0.0, 0.0)

    def __post_init__(self):
        angles = (self.yaw, self.pitch, self.roll)
        if not all(np.isfinite(a) for a in angles):
            raise DataError("rotation angles must be finite")
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise DataError("translation must be a finite 3-vector")
        t.setflags(write=False)
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "pitch", float(self.pitch))
        object.__setattr__(self, "roll", float(self.roll))
        object.__setattr__(self, "translation", t)

    @property
    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.yaw, self.pitch, self.roll)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, np.float64) @ self.matrix.T + self.translation


@dataclass(frozen=True)
class SceneParams:
    pose: Pose
    camera: CameraParams
    illumination: np.ndarray

    def __post_init__(self):
        sh = np.asarray(self.illumination, dtype=np.float64)
        if sh.shape != (3, 9):
            raise DataError(
                f"illumination must be 3x9 SH coefficients, got {sh.shape}"
            )
        if not np.all(np.isfinite(sh)):
            raise DataError("illumination coefficients must be finite")
        sh.setflags(write=False)
        object.__setattr__(self, "illumination", sh)

    def with_pose(self, **kwargs) -> "SceneParams":
        return replace(self, pose=replace(self.pose, **kwargs))

    def with_illumination(self, sh) -> "SceneParams":
        return replace(self, illumination=np.asarray(sh, dtype=np.float64))


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rz(roll) @ Rx(pitch) @ Ry(yaw); yaw turns about the up axis."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return rz @ rx @ ry


def project(camera: CameraParams, pose: Pose, points):
    """Pixel coordinates, camera-space depth and a validity flag per point.

    Points behind the near plane are flagged invalid, never raised.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pose.apply(pts)
    z = cam[:, 2]
    valid = z >= NEAR_PLANE
    cx, cy = camera.principal
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cx + camera.focal * cam[:, 0] / z
        v = cy - camera.focal * cam[:, 1] / z
    pixels = np.stack([u, v], axis=1)
    pixels[~valid] = np.nan
    return pixels, z, valid


# -- spherical harmonics shading --------------------------------------------


def sh_basis(normals) -> np.ndarray:
    """Order-2 real SH basis with Lambertian band constants folded in."""
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    a0, a1, a2 = SH_BAND_FACTORS
    return np.stack(
        [
            np.full_like(x, a0 * _SH_Y0),
            a1 * 0.488603 * y,
            a1 * 0.488603 * z,
            a1 * 0.488603 * x,
            a2 * 1.092548 * x * y,
            a2 * 1.092548 * y * z,
            a2 * 0.315392 * (3.0 * z * z - 1.0),
            a2 * 1.092548 * x * z,
            a2 * 0.546274 * (x * x - y * y),
        ],
        axis=-1,
    )


def shade(albedo, normal, sh, clamp: bool = True):
    """Irradiance-modulated albedo for unit normals; clamped at zero.

    clamp=False exposes the raw signed value (diagnostics only).
    """
    normal = np.asarray(normal, dtype=np.float64)
    norms = np.linalg.norm(normal, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= 1e-3):
        raise DataError("shading normals must be unit length within 1e-3")
    sh = np.asarray(sh, dtype=np.float64)
    basis = sh_basis(normal)
    irradiance = basis @ sh.T  # (..., 3)
    color = np.asarray(albedo, dtype=np.float64) * irradiance
    return np.maximum(color, 0.0) if clamp else color


def ambient_illumination(strength: float = 1.0, color=(1.0, 1.0, 1.0)) -> np.ndarray:
    """SH coefficients of a constant environment.

    shade(albedo, any normal) == strength * color * albedo.
    """
    sh = np.zeros((3, 9))
    sh[:, 0] = strength * np.asarray(color, dtype=np.float64) / (
        SH_BAND_FACTORS[0] * _SH_Y0
    )
    return sh


# -- rasterization -----------------------------------------------------------


@dataclass
class RenderOutput:
    color: np.ndarray  # (h, w, 3) linear RGB, zero outside the silhouette
    depth: np.ndarray  # (h, w), +inf outside
    mask: np.ndarray  # (h, w) bool silhouette
    tri_id: np.ndarray  # (h, w) int32, -1 outside
    bary: np.ndarray  # (h, w, 3) perspective-correct barycentrics
    pixel_normals: np.ndarray  # (h, w, 3) unit camera-space normals
    pixel_albedo: np.ndarray  # (h, w, 3)
    triangles: np.ndarray = None  # topology used for attribute reinterpolation
    illumination: np.ndarray = None

    @property
    def silhouette_area(self) -> int:
        return int(self.mask.sum())

    def with_illumination(self, sh) -> "RenderOutput":
        """Re-shade cached geometry under new lighting; no rasterization."""
        sh = np.asarray(sh, dtype=np.float64)
        color = _shade_masked(self.pixel_albedo, self.pixel_normals, self.mask, sh)
        return replace(self, color=color, illumination=sh)

    def with_albedo(self, vertex_albedo) -> "RenderOutput":
        """Re-interpolate albedo and re-shade; geometry stays cached."""
        if self.triangles is None:
            raise DataError("render output carries no topology to recolor")
        vertex_albedo = np.asarray(vertex_albedo, dtype=np.float64)
        pix = np.zeros_like(self.pixel_albedo)
        if self.mask.any():
            corners = self.triangles[self.tri_id[self.mask]]
            b = self.bary[self.mask]
            pix[self.mask] = np.einsum(
                "pk,pkc->pc", b, vertex_albedo[corners]
            )
        color = _shade_masked(pix, self.pixel_normals, self.mask, self.illumination)
        return replace(self, pixel_albedo=pix, color=color)


def _shade_masked(pixel_albedo, pixel_normals, mask, sh):
    color = np.zeros_like(pixel_albedo)
    if mask.any() and sh is not None:
        color[mask] = shade(pixel_albedo[mask], pixel_normals[mask], sh)
    return color


def rasterize(mesh: Mesh, scene: SceneParams, use_numba=None) -> RenderOutput:
    """Deterministic z-buffered render of a mesh under a scene.

    Whole triangles behind the near plane are culled rather than clipped;
    backfaces (camera-space normal facing away) are culled.
    """
    cam = scene.camera
    r = scene.pose.matrix
    verts = mesh.vertices @ r.T + scene.pose.translation
    vnormals = vertex_normals(mesh) @ r.T
    tri = mesh.triangles

    v0, v1, v2 = verts[tri[:, 0]], verts[tri[:, 1]], verts[tri[:, 2]]
    in_front = (v0[:, 2] >= NEAR_PLANE) & (v1[:, 2] >= NEAR_PLANE) & (
        v2[:, 2] >= NEAR_PLANE
    )
    face_n = np.cross(v1 - v0, v2 - v0)
    centroid = (v0 + v1 + v2) / 3.0
    facing = np.einsum("ij,ij->i", face_n, centroid) < 0.0
    keep = np.flatnonzero(in_front & facing)

    h, w = cam.height, cam.width
    cx, cy = cam.principal
    corner = verts[tri[keep]]  # (m, 3, 3)
    z = corner[:, :, 2]
    xs = cx + cam.focal * corner[:, :, 0] / z
    ys = cy - cam.focal * corner[:, :, 1] / z
    depth, tri_map, bary = fill_triangles(
        xs, ys, z, keep.astype(np.int32), w, h, use_numba=use_numba
    )

    mask = np.isfinite(depth)
    pixel_normals = np.zeros((h, w, 3))
    pixel_albedo = np.zeros((h, w, 3))
    if mask.any():
        corners = tri[tri_map[mask]]
        b = bary[mask]
        pn = np.einsum("pk,pkc->pc", b, vnormals[corners])
        length = np.linalg.norm(pn, axis=1, keepdims=True)
        length[length == 0.0] = 1.0
        pixel_normals[mask] = pn / length
        pixel_albedo[mask] = np.einsum("pk,pkc->pc", b, mesh.albedo[corners])
    color = _shade_masked(pixel_albedo, pixel_normals, mask, scene.illumination)
    return RenderOutput(
        color=color,
        depth=depth,
        mask=mask,
        tri_id=tri_map,
        bary=bary,
        pixel_normals=pixel_normals,
        pixel_albedo=pixel_albedo,
        triangles=tri,
        illumination=scene.illumination,
    )


def frame_mesh(mesh: Mesh, width: int = 256, height: int = 256,
               focal: float = None, fill: float = 0.7,
               yaw: float = math.pi) -> SceneParams:
    """Scene that frames the mesh centered, frontal by default.

    fill is the target silhouette diameter as a fraction of the short
    image side. The default yaw turns a +z-facing head toward the camera.
    """
    if not 0.05 <= fill <= 1.5:
        raise DataError(f"fill fraction {fill} out of range")
    if focal is None:
        focal = 1.5 * min(width, height)
    center = mesh.vertices.mean(axis=0)
    radius = float(np.max(np.linalg.norm(mesh.vertices - center, axis=1)))
    target_px = 0.5 * fill * min(width, height)
    distance = focal * radius / target_px
    pose = Pose(yaw=yaw)
    translation = np.array([0.0, 0.0, distance]) - pose.matrix @ center
    return SceneParams(
        pose=Pose(yaw=yaw, translation=translation),
        camera=CameraParams(
            focal=focal,
            principal=((width - 1) / 2.0, (height - 1) / 2.0),
            width=width,
            height=height,
        ),
        illumination=ambient_illumination(),
    )


# -- likelihoods --------------------------------------------------------------


@dataclass(frozen=True)
class BackgroundModel:
    """Global color histogram of the observed image, add-one smoothed."""

    log_prob: np.ndarray
    bins: int

    @classmethod
    def from_image(cls, image, bins: int = DEFAULT_HISTOGRAM_BINS):
        img = _validate_image(image)
        if bins < 1:
            raise DataError(f"histogram needs at least one bin, got {bins}")
        q = _bin_indices(img, bins)
        flat = (q[..., 0] * bins + q[..., 1]) * bins + q[..., 2]
        counts = np.bincount(flat.ravel(), minlength=bins ** 3).astype(np.float64)
        log_prob = np.log((counts + 1.0) / (counts.sum() + bins ** 3))
        log_prob = log_prob.reshape(bins, bins, bins)
        log_prob.setflags(write=False)
        return cls(log_prob, int(bins))

    def pixel_log_prob(self, image) -> np.ndarray:
        img = _validate_image(image)
        q = _bin_indices(img, self.bins)
        return self.log_prob[q[..., 0], q[..., 1], q[..., 2]]


def _validate_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected an (h, w, 3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DataError("image contains non-finite values")
    return img


def _bin_indices(img: np.ndarray, bins: int) -> np.ndarray:
    q = (np.clip(img, 0.0, 1.0) * bins).astype(np.int64)
    return np.minimum(q, bins - 1)


def image_log_likelihood(rendered: RenderOutput, observed, sigma=None,
                         background: BackgroundModel = None) -> float:
    """Gaussian foreground over the silhouette, histogram background outside."""
    obs = _validate_image(observed)
    if obs.shape[:2] != rendered.mask.shape:
        raise DataError(
            f"observed image is {obs.shape[:2]}, render is {rendered.mask.shape}"
        )
    if sigma is None:
        sigma = DEFAULT_FOREGROUND_STD
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (3,))
    if np.any(sig <= 0):
        raise DataError("foreground std must be positive")
    if background is None:
        background = BackgroundModel.from_image(obs)

    mask = rendered.mask
    fg = 0.0
    if mask.any():
        residual = (rendered.color[mask] - obs[mask]) / sig
        fg = -0.5 * float(np.sum(residual * residual))
        fg -= mask.sum() * float(np.sum(np.log(np.sqrt(2.0 * math.pi) * sig)))
    bg = float(np.sum(background.pixel_log_prob(obs)[~mask]))
    return fg + bg


def silhouette_iou(a, b) -> float:
    """Intersection over union of two masks; 1.0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DataError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# -- image and scene files -----------------------------------------------------


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    a = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(a <= 0.0031308, 12.92 * a,
                    1.055 * np.power(a, 1.0 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    e = np.asarray(encoded, dtype=np.float64)
    return np.where(e <= 0.04045, e / 12.92,
                    np.power((e + 0.055) / 1.055, 2.4))


def save_image(path, linear_rgb):
    """Linear RGB floats to an 8-bit sRGB PNG; values clamped to [0, 1]."""
    img = _validate_image(linear_rgb)
    data = np.round(srgb_encode(img) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            data = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    return srgb_decode(data / 255.0)


def save_mask(path, mask):
    m = np.asarray(mask, dtype=bool)
    buf = io.BytesIO()
    Image.fromarray(np.where(m, 255, 0).astype(np.uint8), mode="L").save(
        buf, format="PNG"
    )
    _atomic_write(path, buf.getvalue())


def load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            data = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read mask ({exc})") from exc
    return data > 127


def scene_to_dict(scene: SceneParams) -> dict:
    return {
        "format_version": SCENE_VERSION,
        "kind": "scene-params",
        "pose": {
            "yaw": scene.pose.yaw,
            "pitch": scene.pose.pitch,
            "roll": scene.pose.roll,
            "translation": [float(v) for v in scene.pose.translation],
        },
        "camera": {
            "focal": scene.camera.focal,
            "principal": list(scene.camera.principal),
            "width": scene.camera.width,
            "height": scene.camera.height,
        },
        "illumination": [[float(v) for v in row] for row in scene.illumination],
    }


def scene_from_dict(doc: dict) -> SceneParams:
    try:
        pose = doc["pose"]
        camera = doc["camera"]
        return SceneParams(
            pose=Pose(
                yaw=pose["yaw"], pitch=pose["pitch"], roll=pose["roll"],
                translation=pose["translation"],
            ),
            camera=CameraParams(
                focal=camera["focal"],
                principal=tuple(camera["principal"]),
                width=camera["width"],
                height=camera["height"],
            ),
            illumination=doc["illumination"],
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed scene document ({exc})") from exc


def save_scene(path, scene: SceneParams):
    payload = json.dumps(scene_to_dict(scene), indent=2, sort_keys=True) + "\n"
    _atomic_write(path, payload.encode("utf-8"))


def load_scene(path) -> SceneParams:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a scene file ({exc})") from exc
    except OSError as exc:
        raise DataError(f"{path}: cannot read scene ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("kind") != "scene-params":
        raise DataError(f"{path}: not a scene file")
    return scene_from_dict(doc)

"""Low-rank morphable models extracted from GP kernels.

A kernel over the template is turned into a finite orthonormal deformation
basis by a landmark (subset-of-domain) eigenfunction approximation: the
kernel gram over m landmark vertices is eigendecomposed, eigenfunctions are
extended to every vertex, eigenvalues pick up the n/m domain rescaling, and
the extended basis is re-orthonormalized in a way that preserves the spanned
covariance. With m = n the construction is exact. The result behaves like a
classical PCA morphable model: instances are mean plus basis times
sqrt(eigenvalue)-scaled standard-normal coefficients.
"""

import io
import json
import os
import zipfile
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, NumericalError
from .kernels import KernelContext, MatrixKernel
from .mesh import Mesh
from .meshfile import load_mesh, save_mesh
from .rng import as_generator, substream

EIG_FLOOR = 1e-10


@dataclass
class LowRankBasis:
    """Orthonormal column basis with descending positive eigenvalues."""

    components: np.ndarray   # (3n, r) float64, orthonormal columns
    eigenvalues: np.ndarray  # (r,) descending, > 0
    notes: tuple = ()

    def __post_init__(self):
        self.components = np.ascontiguousarray(self.components, dtype=np.float64)
        self.eigenvalues = np.ascontiguousarray(self.eigenvalues, dtype=np.float64)
        if self.components.ndim != 2:
            raise DataError("basis components must be a matrix")
        if self.eigenvalues.ndim != 1 or len(self.eigenvalues) != self.components.shape[1]:
            raise DataError("one eigenvalue per basis column required")
        if self.components.shape[0] % 3:
            raise DataError("basis row count must be a multiple of 3")
        if len(self.eigenvalues) and self.eigenvalues.min() <= 0:
            raise DataError("eigenvalues must be positive")
        if np.any(np.diff(self.eigenvalues) > 1e-9 * max(self.eigenvalues[0], 1e-300)
                  if len(self.eigenvalues) else False):
            raise DataError("eigenvalues must be non-increasing")

    @property
    def rank(self) -> int:
        return self.components.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.components.shape[0] // 3

    def truncated(self, rank: int) -> "LowRankBasis":
        if not 0 <= rank <= self.rank:
            raise DataError(f"cannot truncate rank {self.rank} basis to {rank}")
        return LowRankBasis(
            self.components[:, :rank].copy(), self.eigenvalues[:rank].copy(), self.notes
        )

    def displacement(self, coeffs) -> np.ndarray:
        """(n, 3) displacement field for standard-normal coefficients."""
        c = np.asarray(coeffs, dtype=np.float64)
        if c.shape != (self.rank,):
            raise DataError(f"expected {self.rank} coefficients, got shape {c.shape}")
        if self.rank == 0:
            return np.zeros((self.n_vertices, 3))
        flat = self.components @ (np.sqrt(self.eigenvalues) * c)
        return flat.reshape(-1, 3)

    def coefficients(self, deltas) -> np.ndarray:
        """Least-squares standard-normal coefficients for a (n, 3) field."""
        flat = np.asarray(deltas, dtype=np.float64).reshape(-1)
        if flat.shape[0] != self.components.shape[0]:
            raise DataError("field size does not match basis domain")
        if self.rank == 0:
            return np.zeros(0)
        return (self.components.T @ flat) / np.sqrt(self.eigenvalues)


@dataclass
class LatentCode:
    """Standard-normal coefficients for the two model channels."""

    shape: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        self.shape = np.atleast_1d(np.asarray(self.shape, dtype=np.float64))
        self.albedo = np.atleast_1d(np.asarray(self.albedo, dtype=np.float64))
        if not (np.isfinite(self.shape).all() and np.isfinite(self.albedo).all()):
            raise DataError("latent code must be finite")

    @property
    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.shape, self.albedo])

    def copy(self) -> "LatentCode":
        return LatentCode(self.shape.copy(), self.albedo.copy())

    @classmethod
    def zeros(cls, shape_rank: int, albedo_rank: int) -> "LatentCode":
        return cls(np.zeros(shape_rank), np.zeros(albedo_rank))


@dataclass
class MorphableModel:
    """Mean mesh plus low-rank shape and albedo bases."""

    mean: Mesh
    shape: LowRankBasis
    albedo: LowRankBasis
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.mean.n_vertices
        if self.shape.n_vertices != n or self.albedo.n_vertices != n:
            raise DataError("basis domain does not match the mean mesh")

    @property
    def shape_rank(self) -> int:
        return self.shape.rank

    @property
    def albedo_rank(self) -> int:
        return self.albedo.rank

    def truncated(self, shape_rank=None, albedo_rank=None) -> "MorphableModel":
        s = self.shape if shape_rank is None else self.shape.truncated(shape_rank)
        a = self.albedo if albedo_rank is None else self.albedo.truncated(albedo_rank)
        return MorphableModel(self.mean, s, a, dict(self.provenance))


def farthest_point_indices(points, count: int, rng) -> np.ndarray:
    """Greedy maxmin landmark selection, seeded by a random start vertex."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    count = int(count)
    if not 1 <= count <= n:
        raise DataError(f"landmark count {count} out of range for {n} vertices")
    rng = as_generator(rng)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = rng.integers(n)
    dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for k in range(1, count):
        chosen[k] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(pts - pts[chosen[k]], axis=1))
    return chosen


def _canonical_signs(components: np.ndarray) -> np.ndarray:
    if components.shape[1] == 0:
        return components
    anchor = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[anchor, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs


def nystrom_basis(kernel: MatrixKernel, ctx: KernelContext, landmark_count: int,
                  rank: int, rng, eig_floor: float = EIG_FLOOR) -> LowRankBasis:
    """Landmark-based low-rank eigenbasis of a matrix kernel.

    landmark_count is clipped to the vertex count; rank must not exceed
    3 * landmarks. Rank-deficient grams are truncated at
    eig_floor * lambda_max with a note on the returned basis.
    """
    from .kernels import gram_matrix

    n = ctx.size
    m = min(int(landmark_count), n)
    rank = int(rank)
    if rank < 1:
        raise DataError("rank must be at least 1")
    if rank > 3 * m:
        raise DataError(f"rank {rank} exceeds 3 x {m} landmark dimensions")

    landmarks = farthest_point_indices(ctx.positions, m, rng)
    g = gram_matrix(kernel, ctx, landmarks)
    w, u = np.linalg.eigh(g)
    w, u = w[::-1], u[:, ::-1]

    notes = []
    usable = int(np.sum(w > eig_floor * max(w[0], 0.0)))
    if usable == 0:
        raise NumericalError("kernel gram over landmarks is numerically zero")
    if usable < rank:
        notes.append(
            f"rank reduced from {rank} to {usable}: gram eigenvalues below "
            f"{eig_floor:g} of the largest"
        )
        rank = usable
    w, u = w[:rank], u[:, :rank]

    cross = kernel.block_matrix(ctx, np.arange(n), landmarks)  # (3n, 3m)
    phi = cross @ (u / w)
    norms = np.linalg.norm(phi, axis=0)
    if norms.min() <= 0:
        raise NumericalError("extended eigenfunction collapsed to zero")
    phi /= norms
    lam = w * (n / m)

    # re-orthonormalize while preserving the spanned covariance
    q, r = np.linalg.qr(phi * np.sqrt(lam))
    d, v = np.linalg.eigh(r @ r.T)
    d, v = d[::-1], v[:, ::-1]
    keep = d > eig_floor * max(d[0], 0.0)
    if not np.all(keep):
        notes.append(
            f"dropped {int(np.sum(~keep))} near-null directions during "
            "re-orthonormalization"
        )
    d, v = d[keep], v[:, keep]
    components = _canonical_signs(q @ v)
    return LowRankBasis(components, d, tuple(notes))


@dataclass(frozen=True)
class NystromConfig:
    shape_landmarks: int = 1000
    albedo_landmarks: int = 2000
    shape_rank: int = 200
    albedo_rank: int = 200
    eig_floor: float = EIG_FLOOR

    def clipped(self, n_vertices: int) -> "NystromConfig":
        return replace(
            self,
            shape_landmarks=min(self.shape_landmarks, n_vertices),
            albedo_landmarks=min(self.albedo_landmarks, n_vertices),
            shape_rank=min(self.shape_rank, 3 * min(self.shape_landmarks, n_vertices)),
            albedo_rank=min(self.albedo_rank, 3 * min(self.albedo_landmarks, n_vertices)),
        )


def build_gp_model(template: Mesh, recipe, config: NystromConfig = None,
                   seed: int = 0) -> MorphableModel:
    """Morphable model from a template mesh and a kernel recipe."""
    cfg = (config or NystromConfig()).clipped(template.n_vertices)
    ctx = KernelContext.from_mesh(template)
    shape = nystrom_basis(
        recipe.shape, ctx, cfg.shape_landmarks, cfg.shape_rank,
        substream(seed, "nystrom.shape"), cfg.eig_floor,
    )
    albedo = nystrom_basis(
        recipe.albedo, ctx, cfg.albedo_landmarks, cfg.albedo_rank,
        substream(seed, "nystrom.albedo"), cfg.eig_floor,
    )
    provenance = {
        "builder": "gp-nystrom",
        "kernel": getattr(recipe, "name", "custom"),
        "seed": int(seed),
        "nystrom": {
            "shape_landmarks": cfg.shape_landmarks,
            "albedo_landmarks": cfg.albedo_landmarks,
            "shape_rank": shape.rank,
            "albedo_rank": albedo.rank,
        },
    }
    if shape.notes or albedo.notes:
        provenance["notes"] = list(shape.notes) + list(albedo.notes)
    return MorphableModel(template.copy(), shape, albedo, provenance)


def instance(model: MorphableModel, code: LatentCode) -> Mesh:
    """Mesh for a latent code. Albedo is clamped to [0, 1]."""
    positions = model.mean.vertices + model.shape.displacement(code.shape)
    albedo = model.mean.albedo + model.albedo.displacement(code.albedo)
    return Mesh(positions, model.mean.triangles, np.clip(albedo, 0.0, 1.0))


def sample(model: MorphableModel, rng) -> tuple:
    """Draw (code, mesh) with standard-normal coefficients.

    Draw order is shape then albedo from the same generator, which mixture
    sampling relies on to reproduce component draws exactly.
    """
    rng = as_generator(rng)
    code = LatentCode(
        rng.standard_normal(model.shape_rank),
        rng.standard_normal(model.albedo_rank),
    )
    return code, instance(model, code)


def project(model: MorphableModel, mesh: Mesh):
    """Closest latent code for a mesh in model topology.

    Returns (code, residuals) where residuals hold the per-vertex mean
    distance between the mesh and its reconstruction, per channel.
    """
    if mesh.n_vertices != model.mean.n_vertices:
        raise DataError(
            f"mesh has {mesh.n_vertices} vertices, model domain has "
            f"{model.mean.n_vertices}"
        )
    code = LatentCode(
        model.shape.coefficients(mesh.vertices - model.mean.vertices),
        model.albedo.coefficients(mesh.albedo - model.mean.albedo),
    )
    recon_pos = model.mean.vertices + model.shape.displacement(code.shape)
    recon_alb = model.mean.albedo + model.albedo.displacement(code.albedo)
    residuals = {
        "shape": float(np.mean(np.linalg.norm(mesh.vertices - recon_pos, axis=1))),
        "albedo": float(np.mean(np.linalg.norm(mesh.albedo - recon_alb, axis=1))),
    }
    return code, residuals


def draw_sample(model: MorphableModel, seed: int, index: int = 0):
    """Seeded sample: draw `index` of the stream for `seed`.

    Mixture sampling uses the same stream layout, so a point-mass mixture
    reproduces these draws bitwise.
    """
    return sample(model, substream(seed, f"sample.{index}"))


def latent_cosine(a: LatentCode, b: LatentCode) -> float:
    """Cosine similarity of concatenated latent vectors; 0 if either is zero."""
    va, vb = a.concatenated, b.concatenated
    if len(va) != len(vb):
        raise DataError(
            f"latent length mismatch: {len(va)} vs {len(vb)}"
        )
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(va, vb) / (na * nb))


def log_prior(code: LatentCode) -> float:
    """Standard-normal log density of all coefficients."""
    c = code.concatenated
    return float(-0.5 * np.sum(c * c) - 0.5 * len(c) * np.log(2.0 * np.pi))


# -- model archive ---------------------------------------------------------

_MAGIC = b"GPMMARR1"
FORMAT_VERSION = 1


def _encode_matrix(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim == 1:
        a = a[:, None]
    head = _MAGIC + np.asarray(a.shape, dtype="<u8").tobytes()
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def _decode_matrix(blob: bytes, name: str) -> np.ndarray:
    if blob[:8] != _MAGIC:
        raise DataError(f"{name}: bad matrix header")
    rows, cols = np.frombuffer(blob, "<u8", 2, 8)
    want = 24 + rows * cols * 4
    if len(blob) != want:
        raise DataError(f"{name}: expected {want} bytes, found {len(blob)}")
    data = np.frombuffer(blob, "<f4", rows * cols, 24)
    return data.reshape(int(rows), int(cols)).astype(np.float64)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_model(model: MorphableModel, path):
    """Write the model archive (zip with mean PLY, bases, manifest)."""
    mean_buf = io.BytesIO()
    tmp = str(path) + ".meanply.tmp"
    save_mesh(model.mean, tmp)
    with open(tmp, "rb") as fh:
        mean_bytes = fh.read()
    os.remove(tmp)

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "morphable-model",
        "domain": {
            "n_vertices": model.mean.n_vertices,
            "n_triangles": model.mean.n_triangles,
        },
        "shape": {"rank": model.shape_rank},
        "albedo": {"rank": model.albedo_rank},
        "provenance": model.provenance,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "manifest.json",
                   json.dumps(manifest, indent=2, sort_keys=True).encode())
        _zip_write(zf, "mean.ply", mean_bytes)
        _zip_write(zf, "shape_components.bin", _encode_matrix(model.shape.components))
        _zip_write(zf, "shape_eigenvalues.bin", _encode_matrix(model.shape.eigenvalues))
        _zip_write(zf, "albedo_components.bin", _encode_matrix(model.albedo.components))
        _zip_write(zf, "albedo_eigenvalues.bin", _encode_matrix(model.albedo.eigenvalues))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, str(path))


def load_model(path) -> MorphableModel:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as err:
        raise DataError(f"{path}: not a model archive ({err})") from None
    with zf:
        names = set(zf.namelist())
        needed = {
            "manifest.json", "mean.ply",
            "shape_components.bin", "shape_eigenvalues.bin",
            "albedo_components.bin", "albedo_eigenvalues.bin",
        }
        missing = needed - names
        if missing:
            raise DataError(f"{path}: model archive missing {sorted(missing)}")
        manifest = json.loads(zf.read("manifest.json"))
        version = manifest.get("format_version")
        if version is None:
            raise DataError(f"{path}: manifest lacks format_version")
        if version > FORMAT_VERSION:
            raise DataError(f"{path}: unsupported model format version {version}")

        tmp = str(path) + ".meanload.tmp"
        with open(tmp, "wb") as fh:
            fh.write(zf.read("mean.ply"))
        try:
            mean = load_mesh(tmp, format="ply")
        finally:
            os.remove(tmp)

        def basis(prefix):
            comp = _decode_matrix(zf.read(f"{prefix}_components.bin"), prefix)
            eig = _decode_matrix(zf.read(f"{prefix}_eigenvalues.bin"), prefix)[:, 0]
            declared = manifest.get(prefix, {}).get("rank")
            if declared is not None and declared != comp.shape[1]:
                raise DataError(
                    f"{path}: manifest declares {prefix} rank {declared}, "
                    f"archive stores {comp.shape[1]}"
                )
            if comp.shape[0] != 3 * mean.n_vertices:
                raise DataError(
                    f"{path}: {prefix} basis rows {comp.shape[0]} do not match "
                    f"mesh ({3 * mean.n_vertices})"
                )
            return LowRankBasis(comp, eig)

        model = MorphableModel(
            mean, basis("shape"), basis("albedo"),
            provenance=manifest.get("provenance", {}),
        )
    return model

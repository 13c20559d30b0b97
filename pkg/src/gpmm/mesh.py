"""Triangle meshes with per-vertex albedo, plus the small geometry toolkit
the rest of the package leans on: normals, mirroring, nearest-neighbor
distances, adjacency.

Conventions: vertex positions are millimeters, albedo is linear RGB in
[0, 1], triangles are integer index triples. Meshes are treated as immutable;
operations return new arrays or new meshes.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, TopologyError

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class Mesh:
    """Triangle mesh with per-vertex linear-RGB albedo.

    vertices : (n, 3) float64, millimeters
    triangles : (m, 3) int32, indices into vertices
    albedo : (n, 3) float64 in [0, 1]
    """

    vertices: np.ndarray
    triangles: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32)
        self.albedo = np.ascontiguousarray(self.albedo, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise DataError(f"vertices must be (n, 3), got {self.vertices.shape}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise DataError(f"triangles must be (m, 3), got {self.triangles.shape}")
        if self.albedo.shape != self.vertices.shape:
            raise DataError(
                f"albedo shape {self.albedo.shape} does not match "
                f"vertex shape {self.vertices.shape}"
            )
        if not np.isfinite(self.vertices).all():
            raise DataError("vertices contain non-finite values")
        if self.triangles.size:
            lo, hi = self.triangles.min(), self.triangles.max()
            if lo < 0 or hi >= len(self.vertices):
                raise TopologyError(
                    f"triangle index out of range: {lo if lo < 0 else hi} "
                    f"with {len(self.vertices)} vertices"
                )
        if self.albedo.size and (self.albedo.min() < -1e-9 or self.albedo.max() > 1 + 1e-9):
            raise DataError(
                f"albedo outside [0, 1]: range "
                f"[{self.albedo.min():.6g}, {self.albedo.max():.6g}]"
            )
        np.clip(self.albedo, 0.0, 1.0, out=self.albedo)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.triangles, self.albedo)

    def with_albedo(self, albedo) -> "Mesh":
        return Mesh(self.vertices, self.triangles, albedo)

    def copy(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.triangles.copy(), self.albedo.copy())


@dataclass
class LandmarkSet:
    """Named vertices on a reference topology, optionally with 2D image
    observations.

    entries : list of (name, vertex_id)
    observations : list of (name, x_px, y_px, sigma_px)
    """

    entries: list = field(default_factory=list)
    observations: list = field(default_factory=list)

    def __post_init__(self):
        self.entries = [(str(n), int(v)) for n, v in self.entries]
        self.observations = [
            (str(n), float(x), float(y), float(s)) for n, x, y, s in self.observations
        ]
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise DataError(f"duplicate landmark names: {dup}")
        obs_names = [n for n, _, _, _ in self.observations]
        if len(set(obs_names)) != len(obs_names):
            dup = sorted({n for n in obs_names if obs_names.count(n) > 1})
            raise DataError(f"duplicate landmark observations: {dup}")

    @property
    def names(self):
        return [n for n, _ in self.entries]

    def vertex_id(self, name: str) -> int:
        for n, v in self.entries:
            if n == name:
                return v
        raise KeyError(name)

    def validate_against(self, mesh: Mesh):
        for n, v in self.entries:
            if not 0 <= v < mesh.n_vertices:
                raise DataError(
                    f"landmark {n!r} references vertex {v}, "
                    f"mesh has {mesh.n_vertices} vertices"
                )

    def paired(self):
        """(name, vertex_id, x, y, sigma) for landmarks that have both a
        vertex entry and a 2D observation."""
        obs = {n: (x, y, s) for n, x, y, s in self.observations}
        out = []
        for n, v in self.entries:
            if n in obs:
                x, y, s = obs[n]
                out.append((n, v, x, y, s))
        return out


@dataclass(frozen=True)
class MirrorTransform:
    """Reflection across a coordinate plane through the origin."""

    axis: str = "x"

    def __post_init__(self):
        if self.axis not in _AXES:
            raise DataError(f"mirror axis must be one of x/y/z, got {self.axis!r}")

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[_AXES[self.axis], _AXES[self.axis]] = -1.0
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        out = np.array(points, dtype=np.float64, copy=True)
        out[..., _AXES[self.axis]] *= -1.0
        return out


def vertex_normals(mesh: Mesh, default=None) -> np.ndarray:
    """Area-weighted per-vertex unit normals.

    Vertices not referenced by any non-degenerate triangle have no defined
    normal; `default` fills them (after normalization), otherwise they raise
    TopologyError.
    """
    v, tri = mesh.vertices, mesh.triangles
    acc = np.zeros_like(v)
    if len(tri):
        face = np.cross(v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]])
        np.add.at(acc, tri[:, 0], face)
        np.add.at(acc, tri[:, 1], face)
        np.add.at(acc, tri[:, 2], face)
    norms = np.linalg.norm(acc, axis=1)
    bad = norms < 1e-12
    if bad.any():
        if default is None:
            idx = int(np.flatnonzero(bad)[0])
            raise TopologyError(
                f"vertex {idx} has no usable normal (isolated or only "
                "degenerate triangles); pass a default normal to fill"
            )
        d = np.asarray(default, dtype=np.float64)
        d = d / np.linalg.norm(d)
        acc[bad] = d
        norms[bad] = 1.0
    return acc / norms[:, None]


def face_normals(mesh: Mesh, normalize=True) -> np.ndarray:
    v, tri = mesh.vertices, mesh.triangles
    face = np.cross(v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]])
    if normalize:
        n = np.linalg.norm(face, axis=1)
        n[n < 1e-20] = 1.0
        face = face / n[:, None]
    return face


def mirror_mesh(mesh: Mesh, transform: MirrorTransform = MirrorTransform("x")) -> Mesh:
    """Reflect positions. Triangle winding is flipped so orientation stays
    consistent."""
    tri = mesh.triangles[:, ::-1].copy()
    return Mesh(transform.apply(mesh.vertices), tri, mesh.albedo)


def consistently_oriented(mesh: Mesh) -> bool:
    """True when every shared edge is traversed in opposite directions by its
    two triangles (and no edge is used by more than two)."""
    tri = mesh.triangles
    if not len(tri):
        return True
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    seen = set()
    counts = {}
    for a, b in edges:
        a, b = int(a), int(b)
        if (a, b) in seen:
            return False  # same direction twice
        seen.add((a, b))
        key = (a, b) if a < b else (b, a)
        counts[key] = counts.get(key, 0) + 1
        if counts[key] > 2:
            return False
    return True


def vertex_adjacency(mesh: Mesh):
    """1-ring neighbor indices per vertex, as a list of sorted int arrays."""
    neigh = [set() for _ in range(mesh.n_vertices)]
    for a, b, c in mesh.triangles:
        a, b, c = int(a), int(b), int(c)
        neigh[a].update((b, c))
        neigh[b].update((a, c))
        neigh[c].update((a, b))
    return [np.array(sorted(s), dtype=np.int64) for s in neigh]


def _points(mesh_or_points) -> np.ndarray:
    if isinstance(mesh_or_points, Mesh):
        return mesh_or_points.vertices
    pts = np.asarray(mesh_or_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"expected (n, 3) points, got shape {pts.shape}")
    return pts


def nearest_distances(source, target) -> np.ndarray:
    """Distance from each source point to its nearest target point."""
    src, tgt = _points(source), _points(target)
    if len(src) == 0 or len(tgt) == 0:
        raise DataError("nearest-neighbor distance needs non-empty point sets")
    d, _ = cKDTree(tgt).query(src)
    return d


def chamfer_distance(source, target, symmetric: bool = False) -> float:
    """Mean nearest-neighbor distance from source vertices to the target.

    With symmetric=True, the average of both directions.
    """
    d = float(np.mean(nearest_distances(source, target)))
    if symmetric:
        d = 0.5 * (d + float(np.mean(nearest_distances(target, source))))
    return d


def hausdorff_distance(source, target, symmetric: bool = False) -> float:
    """Largest nearest-neighbor distance between vertex sets."""
    d = float(np.max(nearest_distances(source, target)))
    if symmetric:
        d = max(d, float(np.max(nearest_distances(target, source))))
    return d


def mirror_partners(mesh: Mesh, transform: MirrorTransform = MirrorTransform("x"),
                    tol: float = 1e-6) -> np.ndarray:
    """Index of each vertex's mirror partner on a bilaterally symmetric mesh.

    Raises DataError when some vertex has no partner within `tol`.
    """
    mirrored = transform.apply(mesh.vertices)
    d, idx = cKDTree(mesh.vertices).query(mirrored)
    if np.max(d) > tol:
        worst = int(np.argmax(d))
        raise DataError(
            f"mesh is not mirror-symmetric about {transform.axis}=0: vertex "
            f"{worst} is {d[worst]:.3g} mm from its nearest mirror image"
        )
    return idx.astype(np.int64)


def bilateral_asymmetry(mesh: Mesh, partners: np.ndarray,
                        transform: MirrorTransform = MirrorTransform("x")) -> float:
    """Mean distance between each vertex and the mirror image of its partner.

    Zero for a perfectly symmetric mesh (given template partners), grows as
    left and right halves decorrelate.
    """
    reflected = transform.apply(mesh.vertices[partners])
    return float(np.mean(np.linalg.norm(mesh.vertices - reflected, axis=1)))

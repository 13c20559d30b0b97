"""Matrix-valued GP kernels over a template mesh.

A kernel assigns every ordered vertex pair (i, j) a 3x3 covariance block.
Leaves combine a scalar sum-of-RBF kernel with a constant channel matrix;
an optional mirror term adds covariance between each point and the
reflection of the other, which is what makes sampled faces (or albedo maps)
more bilaterally symmetric. Kernels close under positive weighting and
addition, so model recipes are small expression trees.

Scalar RBF terms measure distance either between template vertex positions
(millimeters) or between template albedo values (linear RGB). The RBF form
is amplitude * exp(-d^2 / scale^2).
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DataError
from .mesh import Mesh, MirrorTransform

POSITION = "position"
ALBEDO = "albedo"


@dataclass(frozen=True)
class RbfTerm:
    amplitude: float
    scale: float
    metric: str = POSITION

    def __post_init__(self):
        if self.amplitude <= 0 or not np.isfinite(self.amplitude):
            raise DataError(f"RBF amplitude must be positive, got {self.amplitude}")
        if self.scale <= 0 or not np.isfinite(self.scale):
            raise DataError(f"RBF scale must be positive, got {self.scale}")
        if self.metric not in (POSITION, ALBEDO):
            raise DataError(f"unknown RBF metric {self.metric!r}")


@dataclass(frozen=True)
class ScalarKernel:
    """Sum of RBF terms. Bounded by the sum of amplitudes."""

    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise DataError("scalar kernel needs at least one term")

    @property
    def amplitude_bound(self) -> float:
        return float(sum(t.amplitude for t in self.terms))

    @property
    def has_albedo_metric(self) -> bool:
        return any(t.metric == ALBEDO for t in self.terms)


@dataclass(frozen=True)
class Symmetrization:
    """Mirror augmentation of a leaf kernel.

    Adds weight * channel' * k(p_i, mirror(p_j)) to each block, where
    channel' is the reflected channel action when reflect_channels is set
    (used for vector fields whose mirror image flips the across-plane
    component) and the plain channel matrix otherwise (used for albedo,
    which mirroring does not recolor).
    """

    axis: str = "x"
    weight: float = 0.7
    reflect_channels: bool = True

    def __post_init__(self):
        if not 0.0 <= self.weight < 1.0:
            raise DataError(
                f"symmetrization weight must lie in [0, 1), got {self.weight}"
            )
        MirrorTransform(self.axis)  # validates the axis


class KernelContext:
    """Per-template data kernels evaluate against."""

    def __init__(self, positions, albedo):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        self.albedo = np.ascontiguousarray(albedo, dtype=np.float64)
        if self.positions.shape != self.albedo.shape or self.positions.shape[1] != 3:
            raise DataError("kernel context needs matching (n, 3) positions and albedo")
        self._mirrored = {}

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "KernelContext":
        return cls(mesh.vertices, mesh.albedo)

    @property
    def size(self) -> int:
        return len(self.positions)

    def mirrored_positions(self, axis: str) -> np.ndarray:
        if axis not in self._mirrored:
            self._mirrored[axis] = MirrorTransform(axis).apply(self.positions)
        return self._mirrored[axis]


def _scalar_gram(kernel: ScalarKernel, ctx: KernelContext, rows, cols,
                 mirror_axis=None) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = np.zeros((len(rows), len(cols)))
    for term in kernel.terms:
        if term.metric == POSITION:
            q = (ctx.mirrored_positions(mirror_axis) if mirror_axis
                 else ctx.positions)
            d2 = cdist(ctx.positions[rows], q[cols], "sqeuclidean")
        else:
            if mirror_axis:
                raise DataError("albedo-metric terms cannot be mirror-evaluated")
            d2 = cdist(ctx.albedo[rows], ctx.albedo[cols], "sqeuclidean")
        out += term.amplitude * np.exp(-d2 / (term.scale * term.scale))
    return out


@dataclass(frozen=True, eq=False)
class MatrixKernel:
    """Node of a matrix-kernel expression tree.

    Exactly one of (base, parts) is set: a leaf evaluates
    channel * base(i, j) plus the optional mirror term; an interior node is
    a positively weighted sum of child kernels.
    """

    base: ScalarKernel = None
    channel: np.ndarray = None
    symmetrize: Symmetrization = None
    parts: tuple = ()

    def __post_init__(self):
        if (self.base is None) == (not self.parts):
            raise DataError("kernel node must be either a leaf or a sum")
        if self.base is not None:
            ch = np.eye(3) if self.channel is None else np.asarray(self.channel, float)
            if ch.shape != (3, 3) or not np.allclose(ch, ch.T, atol=1e-12):
                raise DataError("channel matrix must be symmetric 3x3")
            if np.linalg.eigvalsh(ch).min() < -1e-12:
                raise DataError("channel matrix must be positive semidefinite")
            object.__setattr__(self, "channel", ch)
            if self.symmetrize is not None:
                if self.base.has_albedo_metric:
                    raise DataError(
                        "symmetrization is undefined for albedo-metric terms"
                    )
                if self.symmetrize.reflect_channels:
                    refl = MirrorTransform(self.symmetrize.axis).matrix
                    if not np.allclose(refl @ ch, ch @ refl, atol=1e-12):
                        raise DataError(
                            "reflect_channels needs a channel matrix that "
                            "commutes with the reflection"
                        )
        else:
            parts = tuple((float(w), k) for w, k in self.parts)
            for w, k in parts:
                if w <= 0:
                    raise DataError(f"sum weights must be positive, got {w}")
                if not isinstance(k, MatrixKernel):
                    raise DataError("sum parts must be MatrixKernel instances")
            object.__setattr__(self, "parts", parts)

    # -- algebra ---------------------------------------------------------
    def __add__(self, other):
        return MatrixKernel(parts=((1.0, self), (1.0, other)))

    def __rmul__(self, w):
        return MatrixKernel(parts=((float(w), self),))

    __mul__ = __rmul__

    # -- evaluation ------------------------------------------------------
    def block_matrix(self, ctx: KernelContext, rows, cols) -> np.ndarray:
        """Dense (3r, 3c) matrix of 3x3 blocks for rows x cols vertex ids."""
        if self.base is not None:
            g = _scalar_gram(self.base, ctx, rows, cols)
            out = np.kron(g, self.channel)
            if self.symmetrize is not None:
                s = self.symmetrize
                gm = _scalar_gram(self.base, ctx, rows, cols, mirror_axis=s.axis)
                ch = self.channel
                if s.reflect_channels:
                    ch = MirrorTransform(s.axis).matrix @ ch
                out += s.weight * np.kron(gm, ch)
            return out
        out = None
        for w, k in self.parts:
            term = w * k.block_matrix(ctx, rows, cols)
            out = term if out is None else out + term
        return out

    def __call__(self, ctx: KernelContext, i: int, j: int) -> np.ndarray:
        """Single 3x3 covariance block."""
        return self.block_matrix(ctx, [int(i)], [int(j)])


def gram_matrix(kernel: MatrixKernel, ctx: KernelContext, indices) -> np.ndarray:
    """Dense (3m, 3m) gram over distinct vertex indices."""
    idx = np.asarray(indices, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise DataError("gram indices must be distinct")
    if idx.size == 0:
        raise DataError("gram needs at least one index")
    if idx.min() < 0 or idx.max() >= ctx.size:
        raise DataError("gram index out of range")
    return kernel.block_matrix(ctx, idx, idx)


def uniform_correlation(x: float) -> np.ndarray:
    """3x3 matrix with unit diagonal and constant off-diagonal correlation.

    Eigenvalues are 1 + 2x and a double 1 - x, so PSD needs x in [-1/2, 1].
    """
    if not -0.5 <= x <= 1.0:
        raise DataError(f"uniform correlation must lie in [-0.5, 1], got {x}")
    m = np.full((3, 3), float(x))
    np.fill_diagonal(m, 1.0)
    return m


# -- face-model recipes ---------------------------------------------------

@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the face-model kernel family (mm and RGB units)."""

    shape_amplitudes: tuple = (7.0, 5.0, 3.0)
    shape_scales: tuple = (100.0, 50.0, 10.0)
    albedo_position_amplitudes: tuple = (0.02, 0.01, 0.01)
    albedo_position_scales: tuple = (500.0, 20.0, 2.0)
    albedo_color_amplitude: float = 0.015
    albedo_color_scale: float = 0.15
    symmetry_weight: float = 0.7
    position_channel_correlation: float = 0.9375
    color_channel_correlation: float = 0.95
    mirror_axis: str = "x"

    def override(self, **kwargs) -> "KernelParams":
        unknown = set(kwargs) - set(self.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown kernel parameters: {sorted(unknown)}")
        return replace(self, **kwargs)


def _shape_scalar(p: KernelParams) -> ScalarKernel:
    if len(p.shape_amplitudes) != len(p.shape_scales):
        raise DataError("shape amplitudes and scales must pair up")
    return ScalarKernel(tuple(
        RbfTerm(a, s, POSITION) for a, s in zip(p.shape_amplitudes, p.shape_scales)
    ))


def _albedo_position_scalar(p: KernelParams) -> ScalarKernel:
    if len(p.albedo_position_amplitudes) != len(p.albedo_position_scales):
        raise DataError("albedo amplitudes and scales must pair up")
    return ScalarKernel(tuple(
        RbfTerm(a, s, POSITION)
        for a, s in zip(p.albedo_position_amplitudes, p.albedo_position_scales)
    ))


def _albedo_color_scalar(p: KernelParams) -> ScalarKernel:
    return ScalarKernel((RbfTerm(p.albedo_color_amplitude, p.albedo_color_scale, ALBEDO),))


def _build_recipe(name: str, p: KernelParams):
    eye = np.eye(3)
    m_pos = uniform_correlation(p.position_channel_correlation)
    m_col = uniform_correlation(p.color_channel_correlation)
    sym_shape = Symmetrization(p.mirror_axis, p.symmetry_weight, reflect_channels=True)
    sym_albedo = Symmetrization(p.mirror_axis, p.symmetry_weight, reflect_channels=False)

    shape_plain = MatrixKernel(base=_shape_scalar(p), channel=eye)
    shape_sym = MatrixKernel(base=_shape_scalar(p), channel=eye, symmetrize=sym_shape)

    pos_plain = MatrixKernel(base=_albedo_position_scalar(p), channel=eye)
    col_plain = MatrixKernel(base=_albedo_color_scalar(p), channel=eye)
    pos_cor = MatrixKernel(base=_albedo_position_scalar(p), channel=m_pos)
    col_cor = MatrixKernel(base=_albedo_color_scalar(p), channel=m_col)
    pos_sym = MatrixKernel(base=_albedo_position_scalar(p), channel=m_pos,
                           symmetrize=sym_albedo)

    table = {
        "standard-full": (shape_plain, 0.5 * pos_plain + 0.5 * col_plain),
        "standard-rgb": (shape_plain, col_plain),
        "standard-xyz": (shape_plain, pos_plain),
        "symmetric-full": (shape_sym, 0.5 * col_cor + 0.5 * pos_sym),
        "symmetric-rgb": (shape_sym, col_cor),
        "symmetric-xyz": (shape_sym, pos_sym),
        "correlated-full": (shape_plain, 0.5 * col_cor + 0.5 * pos_cor),
        "correlated-rgb": (shape_plain, col_cor),
        "correlated-xyz": (shape_plain, pos_cor),
    }
    if name not in table:
        raise DataError(
            f"unknown kernel recipe {name!r}; available: {', '.join(sorted(table))}"
        )
    return table[name]


RECIPE_NAMES = (
    "standard-full", "standard-rgb", "standard-xyz",
    "symmetric-full", "symmetric-rgb", "symmetric-xyz",
    "correlated-full", "correlated-rgb", "correlated-xyz",
)


@dataclass(frozen=True)
class KernelRecipe:
    name: str
    shape: MatrixKernel
    albedo: MatrixKernel
    params: KernelParams = field(default_factory=KernelParams)


def kernel_recipe(name: str, params: KernelParams = None, **overrides) -> KernelRecipe:
    """Named shape/albedo kernel pair. Names are case-insensitive."""
    p = (params or KernelParams()).override(**overrides)
    canon = str(name).lower()
    shape, albedo = _build_recipe(canon, p)
    return KernelRecipe(canon, shape, albedo, p)


# -- serialization ---------------------------------------------------------

def kernel_to_dict(k: MatrixKernel) -> dict:
    if k.base is not None:
        d = {
            "kind": "leaf",
            "terms": [
                {"amplitude": t.amplitude, "scale": t.scale, "metric": t.metric}
                for t in k.base.terms
            ],
            "channel_matrix": k.channel.tolist(),
        }
        if k.symmetrize is not None:
            s = k.symmetrize
            d["symmetrize"] = {
                "axis": s.axis, "weight": s.weight,
                "reflect_channels": s.reflect_channels,
            }
        return d
    return {
        "kind": "sum",
        "parts": [{"weight": w, "kernel": kernel_to_dict(c)} for w, c in k.parts],
    }


def kernel_from_dict(d: dict) -> MatrixKernel:
    try:
        kind = d["kind"]
        if kind == "leaf":
            terms = tuple(
                RbfTerm(t["amplitude"], t["scale"], t.get("metric", POSITION))
                for t in d["terms"]
            )
            sym = None
            if d.get("symmetrize"):
                s = d["symmetrize"]
                sym = Symmetrization(
                    s.get("axis", "x"), s["weight"], s.get("reflect_channels", True)
                )
            return MatrixKernel(
                base=ScalarKernel(terms),
                channel=np.asarray(d["channel_matrix"], dtype=np.float64),
                symmetrize=sym,
            )
        if kind == "sum":
            return MatrixKernel(parts=tuple(
                (p["weight"], kernel_from_dict(p["kernel"])) for p in d["parts"]
            ))
    except KeyError as err:
        raise DataError(f"kernel description missing field {err}") from None
    raise DataError(f"unknown kernel node kind {d.get('kind')!r}")


def recipe_to_dict(r: KernelRecipe) -> dict:
    p = r.params
    return {
        "format_version": 1,
        "kind": "kernel-recipe",
        "name": r.name,
        "params": {
            "shape_amplitudes": list(p.shape_amplitudes),
            "shape_scales": list(p.shape_scales),
            "albedo_position_amplitudes": list(p.albedo_position_amplitudes),
            "albedo_position_scales": list(p.albedo_position_scales),
            "albedo_color_amplitude": p.albedo_color_amplitude,
            "albedo_color_scale": p.albedo_color_scale,
            "symmetry_weight": p.symmetry_weight,
            "position_channel_correlation": p.position_channel_correlation,
            "color_channel_correlation": p.color_channel_correlation,
            "mirror_axis": p.mirror_axis,
        },
        "shape": kernel_to_dict(r.shape),
        "albedo": kernel_to_dict(r.albedo),
    }


def recipe_from_dict(d: dict) -> KernelRecipe:
    if d.get("kind") != "kernel-recipe":
        raise DataError("not a kernel recipe document")
    params = d.get("params", {})
    tuple_keys = (
        "shape_amplitudes", "shape_scales",
        "albedo_position_amplitudes", "albedo_position_scales",
    )
    params = {
        k: tuple(v) if k in tuple_keys else v for k, v in params.items()
    }
    p = KernelParams().override(**params)
    name = d.get("name", "custom")
    if "shape" in d and "albedo" in d:
        return KernelRecipe(
            name, kernel_from_dict(d["shape"]), kernel_from_dict(d["albedo"]), p
        )
    return kernel_recipe(name, p)


def save_recipe(r: KernelRecipe, path):
    with open(path, "w") as fh:
        json.dump(recipe_to_dict(r), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_recipe(path) -> KernelRecipe:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as err:
            raise DataError(f"{path}: invalid JSON ({err})") from None
    return recipe_from_dict(d)

"""Synthetic head templates.

Procedural ellipsoid "heads" with a painted face, used by the test suite,
the README walkthrough, and anywhere a small deterministic template is
needed. The mesh is exactly mirror-symmetric about x = 0 down to the last
bit: the x > 0 half is generated and the other half is copied with the sign
flipped, and albedo is a function of (|x|, y, z) evaluated once per mirror
pair. +x is the head's left side, +y is up, +z is the facing direction.
"""

import numpy as np

from .errors import DataError
from .mesh import LandmarkSet, Mesh


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


# angular features painted on the unit sphere; centers use |x| so both sides
# of the face get bitwise-identical colors
_EYE_DIR = _unit((0.40, 0.28, 0.87))
_BROW_DIR = _unit((0.40, 0.50, 0.77))
_CHEEK_DIR = _unit((0.68, -0.18, 0.71))
_NOSE_DIR = _unit((0.0, -0.05, 1.0))


def _paint_face(unit_dirs, skin, hue_shift):
    """Albedo for unit directions, symmetric in x by construction."""
    u = np.abs(unit_dirs[:, 0])
    y = unit_dirs[:, 1]
    z = unit_dirs[:, 2]
    half = np.column_stack([u, y, z])

    albedo = np.tile(np.asarray(skin, dtype=np.float64), (len(unit_dirs), 1))

    eye = half @ _EYE_DIR > 0.975
    albedo[eye] = (0.13, 0.10, 0.09)
    brow = (half @ _BROW_DIR > 0.978) & ~eye
    albedo[brow] = (0.30, 0.21, 0.15)
    nose = half @ _NOSE_DIR > 0.985
    albedo[nose] = np.clip(np.asarray(skin) * 1.12, 0.0, 1.0)
    mouth = (u < 0.30) & (y > -0.52) & (y < -0.30) & (z > 0.62)
    albedo[mouth] = (0.55, 0.18, 0.16)
    cheek = (half @ _CHEEK_DIR > 0.982) & ~mouth
    albedo[cheek] = np.clip(np.asarray(skin) + (0.05, -0.02, -0.02), 0.0, 1.0)

    if hue_shift:
        gains = 1.0 + hue_shift * np.array([0.5, -0.3, 0.8])
        albedo = np.clip(albedo * gains, 0.0, 1.0)
    return albedo


def head_template(rings: int = 26, segments: int = 20,
                  radii=(80.0, 95.0, 90.0), skin=(0.80, 0.62, 0.52),
                  hue_shift: float = 0.0):
    """Build a painted ellipsoid head.

    Parameters
    ----------
    rings, segments : latitude/longitude resolution; segments must be even
        so the longitude grid has exact mirror pairs. Vertex count is
        (rings - 1) * segments + 2.
    radii : ellipsoid semi-axes in millimeters (x, y, z).
    skin : base albedo.
    hue_shift : small deterministic recoloring, handy for making visually
        distinct identities from the same topology.

    Returns
    -------
    (Mesh, LandmarkSet) with eight named landmarks, left/right pairs
    matching across the mirror plane.
    """
    if rings < 3 or segments < 6:
        raise DataError("head_template needs rings >= 3 and segments >= 6")
    if segments % 2:
        raise DataError("segments must be even for exact mirror symmetry")

    rx, ry, rz = (float(r) for r in radii)
    verts = np.empty(((rings - 1) * segments + 2, 3), dtype=np.float64)
    verts[0] = (0.0, 1.0, 0.0)   # north pole
    verts[-1] = (0.0, -1.0, 0.0)

    def ring_vertex(i, j):
        return 1 + (i - 1) * segments + j

    for i in range(1, rings):
        theta = np.pi * i / rings
        st, y = np.sin(theta), np.cos(theta)
        # x >= 0 half computed, x < 0 half mirrored bit-exactly
        for j in range(0, segments // 2 + 1):
            phi = 2.0 * np.pi * j / segments
            x = st * np.sin(phi)
            if j in (0, segments // 2):
                x = 0.0
            verts[ring_vertex(i, j)] = (x, y, st * np.cos(phi))
        for j in range(segments // 2 + 1, segments):
            src = verts[ring_vertex(i, segments - j)]
            verts[ring_vertex(i, j)] = (-src[0], src[1], src[2])

    tris = []
    for j in range(segments):
        jn = (j + 1) % segments
        tris.append((0, ring_vertex(1, j), ring_vertex(1, jn)))
        tris.append((len(verts) - 1, ring_vertex(rings - 1, jn), ring_vertex(rings - 1, j)))
    for i in range(1, rings - 1):
        for j in range(segments):
            jn = (j + 1) % segments
            a, b = ring_vertex(i, j), ring_vertex(i, jn)
            c, d = ring_vertex(i + 1, j), ring_vertex(i + 1, jn)
            tris.append((a, c, d))
            tris.append((a, d, b))
    triangles = np.asarray(tris, dtype=np.int32)

    albedo = _paint_face(verts, skin, hue_shift)
    positions = verts * np.array([rx, ry, rz])

    def nearest(direction):
        return int(np.argmax(verts @ _unit(direction)))

    landmarks = LandmarkSet(entries=[
        ("nose_tip", nearest((0.0, -0.05, 1.0))),
        ("forehead", nearest((0.0, 0.62, 0.78))),
        ("chin", nearest((0.0, -0.80, 0.60))),
        ("mouth_center", nearest((0.0, -0.42, 0.91))),
        ("left_eye", nearest((0.40, 0.28, 0.87))),
        ("right_eye", nearest((-0.40, 0.28, 0.87))),
        ("left_cheek", nearest((0.68, -0.18, 0.71))),
        ("right_cheek", nearest((-0.68, -0.18, 0.71))),
    ])
    mesh = Mesh(positions, triangles, albedo)
    landmarks.validate_against(mesh)
    return mesh, landmarks

"""Mesh and landmark file IO.

PLY is the canonical format (binary little-endian by default, ASCII
supported both ways). The canonical layout stores positions and colors as
float32, colors in [0, 1], so geometry and albedo survive a save/load round
trip bit-identically at float32 precision. uchar colors and extra vertex
properties from other tools are accepted on read. OBJ is import-only.

Landmarks travel as two small CSV schemas: `name,vertex_id` for mesh
landmarks and `name,x_px,y_px,sigma_px` for image observations.
"""

import csv
import io
import os

import numpy as np

from .errors import DataError, MeshFormatError
from .mesh import LandmarkSet, Mesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class _Element:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.properties = []   # (name, dtype) scalars
        self.list_property = None  # (name, count_dtype, item_dtype)


def _parse_header(data: bytes, path):
    if not data.startswith(b"ply"):
        raise MeshFormatError("not a PLY file (missing 'ply' magic)", path, 1)
    end = data.find(b"end_header")
    if end < 0:
        raise MeshFormatError("PLY header has no end_header", path)
    header_blob = data[:end]
    body_start = data.find(b"\n", end) + 1
    if body_start == 0:
        raise MeshFormatError("PLY end_header line is not terminated", path)
    fmt = None
    elements = []
    for ln, raw in enumerate(header_blob.split(b"\n"), start=1):
        line = raw.decode("ascii", "replace").strip()
        if ln == 1 or not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        parts = line.split()
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in (
                "ascii", "binary_little_endian", "binary_big_endian"
            ):
                raise MeshFormatError(f"unsupported PLY format line: {line!r}", path, ln)
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise MeshFormatError(f"bad element line: {line!r}", path, ln)
            try:
                elements.append(_Element(parts[1], int(parts[2])))
            except ValueError:
                raise MeshFormatError(f"bad element count: {line!r}", path, ln) from None
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError("property before any element", path, ln)
            el = elements[-1]
            if parts[1] == "list":
                if len(parts) != 5 or parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise MeshFormatError(f"bad list property: {line!r}", path, ln)
                if el.list_property is not None or el.properties:
                    raise MeshFormatError(
                        "only a single list property per element is supported", path, ln
                    )
                el.list_property = (parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])
            else:
                if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                    raise MeshFormatError(f"bad property line: {line!r}", path, ln)
                if el.list_property is not None:
                    raise MeshFormatError(
                        "scalar property after a list property is not supported", path, ln
                    )
                el.properties.append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise MeshFormatError(f"unrecognized header line: {line!r}", path, ln)
    if fmt is None:
        raise MeshFormatError("PLY header missing format line", path)
    return fmt, elements, body_start


def _ascii_tokens(body: bytes, path):
    for offset, raw in enumerate(body.split(b"\n")):
        line = raw.strip()
        if line:
            yield offset, line.split()


def _read_ply(data: bytes, path, gray_fallback):
    fmt, elements, body_start = _parse_header(data, path)
    swap = "<" if fmt != "binary_big_endian" else ">"
    vertices = triangles = colors = None
    body = data[body_start:]

    if fmt == "ascii":
        lines = _ascii_tokens(body, path)
        for el in elements:
            if el.list_property is None:
                rows = []
                for _ in range(el.count):
                    try:
                        off, toks = next(lines)
                    except StopIteration:
                        raise MeshFormatError(
                            f"unexpected end of file in element {el.name}", path
                        ) from None
                    if len(toks) != len(el.properties):
                        raise MeshFormatError(
                            f"expected {len(el.properties)} values in element "
                            f"{el.name}, got {len(toks)}", path,
                        )
                    rows.append([float(t) for t in toks])
                table = np.asarray(rows, dtype=np.float64)
                if table.size:
                    # honor declared property types so ascii and binary agree
                    for k, (_, t) in enumerate(el.properties):
                        table[:, k] = table[:, k].astype(t).astype(np.float64)
                if el.name == "vertex":
                    vertices, colors = _extract_vertex_table(table, el, path)
            else:
                polys = []
                for _ in range(el.count):
                    try:
                        off, toks = next(lines)
                    except StopIteration:
                        raise MeshFormatError(
                            f"unexpected end of file in element {el.name}", path
                        ) from None
                    cnt = int(toks[0])
                    if len(toks) != cnt + 1:
                        raise MeshFormatError(
                            f"face lists {cnt} indices but line has {len(toks) - 1}",
                            path,
                        )
                    polys.append([int(t) for t in toks[1:]])
                if el.name == "face":
                    triangles = _triangulate(polys, path)
    else:
        offset = 0
        for el in elements:
            if el.list_property is None:
                dt = np.dtype([(n, swap + t) for n, t in el.properties])
                need = dt.itemsize * el.count
                if offset + need > len(body):
                    raise MeshFormatError(
                        f"file truncated in element {el.name} "
                        f"(need {need} bytes at offset {body_start + offset})", path,
                    )
                rec = np.frombuffer(body, dtype=dt, count=el.count, offset=offset)
                offset += need
                if el.name == "vertex":
                    table = np.column_stack(
                        [rec[n].astype(np.float64) for n, _ in el.properties]
                    )
                    vertices, colors = _extract_vertex_table(table, el, path)
            else:
                _, cnt_t, item_t = el.list_property
                cnt_dt = np.dtype(swap + cnt_t)
                item_dt = np.dtype(swap + item_t)
                polys = []
                for k in range(el.count):
                    if offset + cnt_dt.itemsize > len(body):
                        raise MeshFormatError(
                            f"file truncated in {el.name} list {k} "
                            f"(offset {body_start + offset})", path,
                        )
                    cnt = int(np.frombuffer(body, cnt_dt, 1, offset)[0])
                    offset += cnt_dt.itemsize
                    need = cnt * item_dt.itemsize
                    if offset + need > len(body):
                        raise MeshFormatError(
                            f"file truncated in {el.name} list {k} "
                            f"(offset {body_start + offset})", path,
                        )
                    idx = np.frombuffer(body, item_dt, cnt, offset)
                    offset += need
                    polys.append(idx.astype(np.int64).tolist())
                if el.name == "face":
                    triangles = _triangulate(polys, path)

    if vertices is None:
        raise MeshFormatError("PLY file has no vertex element", path)
    if triangles is None:
        triangles = np.zeros((0, 3), dtype=np.int32)
    if colors is None:
        if not gray_fallback:
            raise MeshFormatError(
                "PLY has no per-vertex color; pass gray_fallback=True to load "
                "with neutral albedo", path,
            )
        colors = np.full_like(vertices, 0.5)
    return Mesh(vertices, triangles, colors)


def _extract_vertex_table(table, el, path):
    names = [n for n, _ in el.properties]
    types = dict(el.properties)
    try:
        cols = [names.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise MeshFormatError("vertex element lacks x/y/z properties", path) from None
    vertices = table[:, cols]
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        ccols = [names.index(c) for c in ("red", "green", "blue")]
        colors = table[:, ccols]
        if types["red"] in ("u1", "i1"):
            colors = colors / 255.0
        colors = np.clip(colors, 0.0, 1.0)
    return vertices, colors


def _triangulate(polys, path):
    tris = []
    for k, poly in enumerate(polys):
        if len(poly) < 3:
            raise MeshFormatError(f"face {k} has {len(poly)} vertices", path)
        for i in range(1, len(poly) - 1):
            tris.append((poly[0], poly[i], poly[i + 1]))
    if not tris:
        return np.zeros((0, 3), dtype=np.int32)
    return np.asarray(tris, dtype=np.int32)


def _read_obj(data: bytes, path, gray_fallback):
    vertices, colors, polys = [], [], []
    any_color = False
    for ln, raw in enumerate(data.decode("utf-8", "replace").split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) not in (4, 7):
                raise MeshFormatError(
                    f"vertex line needs 3 or 6 numbers, got {len(parts) - 1}", path, ln
                )
            try:
                nums = [float(p) for p in parts[1:]]
            except ValueError:
                raise MeshFormatError(f"bad vertex line: {line!r}", path, ln) from None
            vertices.append(nums[:3])
            if len(nums) == 6:
                colors.append(nums[3:])
                any_color = True
            else:
                colors.append([0.5, 0.5, 0.5])
        elif tag == "f":
            idx = []
            for tok in parts[1:]:
                head = tok.split("/")[0]
                try:
                    i = int(head)
                except ValueError:
                    raise MeshFormatError(f"bad face index {tok!r}", path, ln) from None
                idx.append(i - 1 if i > 0 else len(vertices) + i)
            if len(idx) < 3:
                raise MeshFormatError("face with fewer than 3 vertices", path, ln)
            polys.append(idx)
        # vn/vt/usemtl/o/g/s/mtllib are irrelevant here
    if not vertices:
        raise MeshFormatError("OBJ file has no vertices", path)
    if not any_color and not gray_fallback:
        raise MeshFormatError(
            "OBJ has no vertex colors; pass gray_fallback=True to load with "
            "neutral albedo", path,
        )
    return Mesh(
        np.asarray(vertices, dtype=np.float64),
        _triangulate(polys, path),
        np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0),
    )


def load_mesh(path, format=None, gray_fallback=False) -> Mesh:
    """Load a triangle mesh with per-vertex albedo.

    format : 'ply' | 'obj' | None (inferred from the extension, falling back
        to PLY magic sniffing)
    gray_fallback : accept colorless files, filling albedo with 0.5
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if format is None:
        ext = os.path.splitext(str(path))[1].lower()
        if ext == ".obj":
            format = "obj"
        elif ext == ".ply" or data.startswith(b"ply"):
            format = "ply"
        else:
            raise MeshFormatError(f"cannot infer mesh format from {path!r}", path)
    if format == "ply":
        return _read_ply(data, path, gray_fallback)
    if format == "obj":
        return _read_obj(data, path, gray_fallback)
    raise MeshFormatError(f"unsupported mesh format {format!r}", path)


def _f32_repr(x: np.float32) -> str:
    return np.format_float_positional(x, unique=True, trim="0")


def save_mesh(mesh: Mesh, path, binary: bool = True):
    """Write the canonical PLY layout (float32 positions and colors)."""
    v = mesh.vertices.astype(np.float32)
    c = mesh.albedo.astype(np.float32)
    tri = mesh.triangles.astype(np.int32)
    fmt = "binary_little_endian" if binary else "ascii"
    header = [
        "ply",
        f"format {fmt} 1.0",
        f"element vertex {len(v)}",
        "property float x",
        "property float y",
        "property float z",
        "property float red",
        "property float green",
        "property float blue",
        f"element face {len(tri)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    buf = io.BytesIO()
    buf.write(("\n".join(header) + "\n").encode("ascii"))
    if binary:
        rec = np.empty((len(v), 6), dtype="<f4")
        rec[:, :3] = v
        rec[:, 3:] = c
        buf.write(rec.tobytes())
        face = np.empty(len(tri), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        face["n"] = 3
        face["idx"] = tri
        buf.write(face.tobytes())
    else:
        for i in range(len(v)):
            vals = [_f32_repr(x) for x in v[i]] + [_f32_repr(x) for x in c[i]]
            buf.write((" ".join(vals) + "\n").encode("ascii"))
        for t in tri:
            buf.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode("ascii"))
    _atomic_write(path, buf.getvalue())


def _atomic_write(path, payload: bytes):
    path = str(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _read_csv_rows(path):
    with open(path, "r", newline="") as fh:
        return [row for row in csv.reader(fh) if row and any(f.strip() for f in row)]


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def load_landmarks(path) -> LandmarkSet:
    """Read a `name,vertex_id` CSV. A header row is tolerated and skipped."""
    rows = _read_csv_rows(path)
    entries = []
    for i, row in enumerate(rows):
        if len(row) != 2:
            raise DataError(f"{path}: row {i + 1} needs 2 fields, got {len(row)}")
        name, vid = row[0].strip(), row[1].strip()
        if i == 0 and not _is_number(vid):
            continue
        try:
            entries.append((name, int(vid)))
        except ValueError:
            raise DataError(f"{path}: row {i + 1} has non-integer vertex id {vid!r}") from None
    return LandmarkSet(entries=entries)


def save_landmarks(landmarks: LandmarkSet, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for name, vid in landmarks.entries:
        w.writerow([name, vid])
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def load_observations(path, default_sigma: float = 4.0) -> list:
    """Read a `name,x_px,y_px[,sigma_px]` CSV into observation tuples."""
    rows = _read_csv_rows(path)
    obs = []
    for i, row in enumerate(rows):
        if len(row) not in (3, 4):
            raise DataError(f"{path}: row {i + 1} needs 3 or 4 fields, got {len(row)}")
        name = row[0].strip()
        if i == 0 and not _is_number(row[1].strip()):
            continue
        try:
            x, y = float(row[1]), float(row[2])
            sigma = float(row[3]) if len(row) == 4 and row[3].strip() else default_sigma
        except ValueError:
            raise DataError(f"{path}: row {i + 1} has a non-numeric field") from None
        if sigma <= 0:
            raise DataError(f"{path}: row {i + 1} has non-positive sigma {sigma}")
        obs.append((name, x, y, sigma))
    names = [o[0] for o in obs]
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate observation names")
    return obs


def save_observations(observations, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for name, x, y, sigma in observations:
        w.writerow([name, repr(float(x)), repr(float(y)), repr(float(sigma))])
    _atomic_write(path, buf.getvalue().encode("utf-8"))

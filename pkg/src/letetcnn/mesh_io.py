"""Tetrahedral mesh I/O: TetGen .node/.ele parsing, validation, normalization,
and VTK legacy export of per-vertex scalar fields.

Meshes are plain vertex/tet index arrays. Parsers accept both 0- and 1-based
TetGen files (base inferred from the first record). All functions are pure;
nothing here mutates its inputs.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np


class MeshFormatError(ValueError):
    """Malformed .node/.ele/VTK content; message carries a line number."""


class MeshValidationError(ValueError):
    """Mesh violates a structural invariant (degenerate tet, bad index...)."""


@dataclass(frozen=True)
class TetMesh:
    """Volumetric mesh: vertices (n,3) float64 and tets (m,4) int64.

    Orientation (positive signed volumes) is only guaranteed after
    :func:`validate_and_orient`.
    """

    vertices: np.ndarray
    tets: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.tets, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshValidationError(f"vertices must be (n, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 4:
            raise MeshValidationError(f"tets must be (m, 4), got {t.shape}")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "tets", t)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]


@dataclass(frozen=True)
class VertexField:
    """One scalar (or fixed-width vector) per vertex."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise MeshValidationError(f"field must be 1-D or 2-D, got ndim={v.ndim}")
        if not np.all(np.isfinite(v)):
            raise MeshValidationError("field contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ScaleRecord:
    """Centroid/scale removed by normalize_mesh; enough to invert the map."""

    centroid: np.ndarray
    scale: float


@dataclass(frozen=True)
class OrientationReport:
    n_flipped: int
    n_duplicates_removed: int
    min_volume: float
    max_volume: float
    min_dihedral_deg: float


def _data_lines(text):
    """Yield (line_number, stripped_content) skipping blanks and # comments."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if content:
            yield lineno, content


def parse_node_file(stream) -> np.ndarray:
    """Parse a TetGen .node stream into an (n, 3) vertex array.

    Header: ``<#points> <dim> <#attrs> <#markers>``. Indexing base (0 or 1)
    is inferred from the first point record; attributes and boundary markers
    are discarded.
    """
    text = stream.read() if hasattr(stream, "read") else stream
    lines = _data_lines(text)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise MeshFormatError("line 1: empty .node file") from None
    parts = header.split()
    if len(parts) < 2:
        raise MeshFormatError(f"line {lineno}: bad .node header {header!r}")
    try:
        n_points, dim = int(parts[0]), int(parts[1])
    except ValueError:
        raise MeshFormatError(f"line {lineno}: non-integer .node header") from None
    if dim != 3:
        raise MeshFormatError(f"line {lineno}: dimension must be 3, got {dim}")
    if n_points < 1:
        raise MeshFormatError(f"line {lineno}: point count must be >= 1")

    coords = np.empty((n_points, 3), dtype=np.float64)
    base = None
    count = 0
    for lineno, content in lines:
        if count >= n_points:
            raise MeshFormatError(
                f"line {lineno}: count mismatch, more than {n_points} point lines"
            )
        fields = content.split()
        if len(fields) < 4:
            raise MeshFormatError(f"line {lineno}: point line needs index + 3 coords")
        try:
            idx = int(fields[0])
            xyz = [float(fields[1]), float(fields[2]), float(fields[3])]
        except ValueError:
            raise MeshFormatError(f"line {lineno}: unparseable point record") from None
        if base is None:
            if idx not in (0, 1):
                raise MeshFormatError(
                    f"line {lineno}: first point index {idx} is neither 0 nor 1"
                )
            base = idx
        if idx != base + count:
            raise MeshFormatError(
                f"line {lineno}: non-contiguous index {idx}, expected {base + count}"
            )
        if not all(np.isfinite(xyz)):
            raise MeshFormatError(f"line {lineno}: non-finite coordinate")
        coords[count] = xyz
        count += 1
    if count != n_points:
        raise MeshFormatError(
            f"count mismatch: header declares {n_points} points, file has {count}"
        )
    return coords


def parse_ele_file(stream, n_vertices: int) -> np.ndarray:
    """Parse a TetGen .ele stream into an (m, 4) tet index array, rebased to 0.

    Header: ``<#tets> <nodes-per-tet> <#attrs>``; only linear (4-node) tets
    are accepted. The indexing base is inferred from the first tet record,
    matching TetGen's convention that .node and .ele share a base.
    """
    text = stream.read() if hasattr(stream, "read") else stream
    lines = _data_lines(text)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise MeshFormatError("line 1: empty .ele file") from None
    parts = header.split()
    if len(parts) < 2:
        raise MeshFormatError(f"line {lineno}: bad .ele header {header!r}")
    try:
        n_tets, npt = int(parts[0]), int(parts[1])
    except ValueError:
        raise MeshFormatError(f"line {lineno}: non-integer .ele header") from None
    if npt != 4:
        raise MeshFormatError(
            f"line {lineno}: nodes-per-tet must be 4 (linear), got {npt}"
        )
    if n_tets < 1:
        raise MeshFormatError(f"line {lineno}: tet count must be >= 1")

    tets = np.empty((n_tets, 4), dtype=np.int64)
    base = None
    count = 0
    for lineno, content in lines:
        if count >= n_tets:
            raise MeshFormatError(
                f"line {lineno}: count mismatch, more than {n_tets} tet lines"
            )
        fields = content.split()
        if len(fields) < 5:
            raise MeshFormatError(f"line {lineno}: tet line needs index + 4 vertices")
        try:
            idx = int(fields[0])
            verts = [int(f) for f in fields[1:5]]
        except ValueError:
            raise MeshFormatError(f"line {lineno}: unparseable tet record") from None
        if base is None:
            if idx not in (0, 1):
                raise MeshFormatError(
                    f"line {lineno}: first tet index {idx} is neither 0 nor 1"
                )
            base = idx
        if idx != base + count:
            raise MeshFormatError(
                f"line {lineno}: non-contiguous index {idx}, expected {base + count}"
            )
        rebased = [v - base for v in verts]
        for v in rebased:
            if v < 0 or v >= n_vertices:
                raise MeshFormatError(
                    f"line {lineno}: vertex index out of range "
                    f"({v} not in [0, {n_vertices}))"
                )
        tets[count] = rebased
        count += 1
    if count != n_tets:
        raise MeshFormatError(
            f"count mismatch: header declares {n_tets} tets, file has {count}"
        )
    return tets


def load_mesh(node_path, ele_path) -> TetMesh:
    """Read a .node/.ele pair from disk; orientation is not yet fixed."""
    with open(node_path) as f:
        vertices = parse_node_file(f)
    with open(ele_path) as f:
        tets = parse_ele_file(f, vertices.shape[0])
    return TetMesh(vertices, tets)


def signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volume det([b-a, c-a, d-a]) / 6 for each tet."""
    a = vertices[tets[:, 0]]
    e1 = vertices[tets[:, 1]] - a
    e2 = vertices[tets[:, 2]] - a
    e3 = vertices[tets[:, 3]] - a
    return np.einsum("ij,ij->i", np.cross(e1, e2), e3) / 6.0


def _min_dihedral_deg(vertices, tets):
    # Interior dihedral along each of the 6 edges of each tet; the angle sits
    # between the projections of the two opposite vertices onto the plane
    # normal to the edge.
    pairs = [(0, 1, 2, 3), (0, 2, 1, 3), (0, 3, 1, 2),
             (1, 2, 0, 3), (1, 3, 0, 2), (2, 3, 0, 1)]
    min_angle = np.inf
    for k, l, i, j in pairs:
        e = vertices[tets[:, l]] - vertices[tets[:, k]]
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        u = vertices[tets[:, i]] - vertices[tets[:, k]]
        v = vertices[tets[:, j]] - vertices[tets[:, k]]
        u = u - np.einsum("ij,ij->i", u, e)[:, None] * e
        v = v - np.einsum("ij,ij->i", v, e)[:, None] * e
        cosang = np.einsum("ij,ij->i", u, v)
        sinang = np.linalg.norm(np.cross(u, v), axis=1)
        ang = np.degrees(np.arctan2(sinang, cosang))
        min_angle = min(min_angle, float(ang.min()))
    return min_angle


def validate_and_orient(mesh: TetMesh):
    """Fix tet orientation, drop duplicate tets, check invariants.

    Returns ``(mesh, OrientationReport)``. A tet is degenerate when its
    |signed volume| falls below 1e-12 x (bounding-box diagonal)^3, which keeps
    the threshold unit-independent. Idempotent on already-valid meshes.
    """
    v, t = mesh.vertices, mesh.tets.copy()
    if mesh.n_vertices < 4:
        raise MeshValidationError(f"mesh needs >= 4 vertices, has {mesh.n_vertices}")
    if mesh.n_tets < 1:
        raise MeshValidationError("mesh has no tets")
    if t.min() < 0 or t.max() >= mesh.n_vertices:
        raise MeshValidationError("tet vertex index out of range")
    sorted_rows = np.sort(t, axis=1)
    if np.any(sorted_rows[:, :-1] == sorted_rows[:, 1:]):
        bad = int(np.nonzero(np.any(sorted_rows[:, :-1] == sorted_rows[:, 1:], axis=1))[0][0])
        raise MeshValidationError(f"tet {bad} has repeated vertices")

    bbox_diag = float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))
    vol_floor = 1e-12 * bbox_diag**3
    vols = signed_volumes(v, t)
    degenerate = np.abs(vols) < vol_floor
    if np.any(degenerate):
        bad = int(np.nonzero(degenerate)[0][0])
        raise MeshValidationError(
            f"degenerate tetrahedron at index {bad} "
            f"(|volume| {abs(vols[bad]):.3e} < {vol_floor:.3e})"
        )

    flip = vols < 0
    # Swapping the last two vertices negates the signed volume.
    tmp = t[flip, 2].copy()
    t[flip, 2] = t[flip, 3]
    t[flip, 3] = tmp
    n_flipped = int(flip.sum())

    _, keep_idx = np.unique(np.sort(t, axis=1), axis=0, return_index=True)
    n_dupes = t.shape[0] - keep_idx.size
    if n_dupes:
        t = t[np.sort(keep_idx)]

    vols = signed_volumes(v, t)
    report = OrientationReport(
        n_flipped=n_flipped,
        n_duplicates_removed=n_dupes,
        min_volume=float(vols.min()),
        max_volume=float(vols.max()),
        min_dihedral_deg=_min_dihedral_deg(v, t),
    )
    return TetMesh(v, t), report


def normalize_mesh(mesh: TetMesh):
    """Translate to zero centroid and scale the farthest vertex to radius 1.

    Returns ``(mesh, ScaleRecord)``; the record inverts the map via
    ``x_original = x * scale + centroid``.
    """
    centroid = mesh.vertices.mean(axis=0)
    radius = float(np.linalg.norm(mesh.vertices - centroid, axis=1).max())
    # Exact short-circuit keeps repeated normalization bit-stable.
    if np.linalg.norm(centroid) <= 1e-13 and abs(radius - 1.0) <= 1e-13:
        return mesh, ScaleRecord(np.zeros(3), 1.0)
    shifted = mesh.vertices - centroid
    scale = float(np.linalg.norm(shifted, axis=1).max())
    if scale <= 0.0:
        raise MeshValidationError("all vertices coincident; cannot normalize")
    return TetMesh(shifted / scale, mesh.tets), ScaleRecord(centroid, scale)


def write_node_file(vertices: np.ndarray) -> str:
    """Serialize vertices as a 0-based TetGen .node file (exact float64)."""
    v = np.asarray(vertices, dtype=np.float64)
    out = io.StringIO()
    out.write(f"{v.shape[0]} 3 0 0\n")
    for i, (x, y, z) in enumerate(v):
        out.write(f"{i} {x:.17g} {y:.17g} {z:.17g}\n")
    return out.getvalue()


def write_ele_file(tets: np.ndarray) -> str:
    """Serialize tets as a 0-based TetGen .ele file."""
    t = np.asarray(tets, dtype=np.int64)
    out = io.StringIO()
    out.write(f"{t.shape[0]} 4 0\n")
    for i, (a, b, c, d) in enumerate(t):
        out.write(f"{i} {a} {b} {c} {d}\n")
    return out.getvalue()


def write_vtk_scalar(mesh: TetMesh, field: VertexField, name: str) -> str:
    """Render mesh + per-vertex scalar as VTK legacy ASCII UNSTRUCTURED_GRID.

    Values are written with %.17g so float64 round-trips exactly through
    re-parsing. Integer fields are declared as ``int``.
    """
    if field.values.shape[0] != mesh.n_vertices:
        raise MeshValidationError(
            f"field length {field.values.shape[0]} != n_vertices {mesh.n_vertices}"
        )
    if field.width != 1:
        raise MeshValidationError(f"scalar export needs width 1, got {field.width}")
    vals = field.values[:, 0]
    is_int = np.issubdtype(vals.dtype, np.integer)
    vtk_type = "int" if is_int else "float"

    out = io.StringIO()
    out.write("# vtk DataFile Version 2.0\n")
    out.write(f"{name}\n")
    out.write("ASCII\n")
    out.write("DATASET UNSTRUCTURED_GRID\n")
    out.write(f"POINTS {mesh.n_vertices} float\n")
    for x, y, z in mesh.vertices:
        out.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
    out.write(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}\n")
    for a, b, c, d in mesh.tets:
        out.write(f"4 {a} {b} {c} {d}\n")
    out.write(f"CELL_TYPES {mesh.n_tets}\n")
    for _ in range(mesh.n_tets):
        out.write("10\n")
    out.write(f"POINT_DATA {mesh.n_vertices}\n")
    out.write(f"SCALARS {name} {vtk_type} 1\n")
    out.write("LOOKUP_TABLE default\n")
    if is_int:
        for v in vals:
            out.write(f"{int(v)}\n")
    else:
        for v in vals:
            out.write(f"{v:.17g}\n")
    return out.getvalue()

import numpy as np
import pytest

from letetcnn.mesh_io import TetMesh, validate_and_orient


# Regular tetrahedron with unit edge length: volume 1/(6 sqrt 2).
REGULAR_TET_VERTS = np.array(
    [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
) / np.sqrt(8.0)
REGULAR_TET_EDGE_WEIGHT = 1.0 / (12.0 * np.sqrt(2.0))  # (1/6) cot(arccos 1/3)
REGULAR_TET_VOLUME = 1.0 / (6.0 * np.sqrt(2.0))


@pytest.fixture
def regular_tet_mesh():
    mesh, _ = validate_and_orient(TetMesh(REGULAR_TET_VERTS, [[0, 1, 2, 3]]))
    return mesh


@pytest.fixture
def two_tet_mesh():
    # Two tets sharing the face (0, 1, 2).
    verts = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
         [0.2, 0.3, 1.0], [0.3, 0.2, -0.8]]
    )
    mesh, _ = validate_and_orient(TetMesh(verts, [[0, 1, 2, 3], [0, 1, 2, 4]]))
    return mesh


def random_blob_mesh(n_extra: int, seed: int) -> TetMesh:
    """Small connected mesh: Delaunay over a random Gaussian cloud.

    No two points share a norm (generic positions), which keeps
    tie-breaking tests deterministic.
    """
    from scipy.spatial import Delaunay

    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((4 + n_extra, 3))
    tri = Delaunay(pts)
    mesh, _ = validate_and_orient(TetMesh(pts, tri.simplices))
    return mesh


@pytest.fixture
def small_random_mesh():
    return random_blob_mesh(30, seed=7)


def fem_element_oracle(p: np.ndarray) -> np.ndarray:
    """Independent linear-FEM element stiffness: V * grad(phi_a).grad(phi_b).

    Barycentric gradients come from the inverse edge matrix, a construction
    disjoint from the dihedral-angle path under test.
    """
    M = np.stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]], axis=1)
    vol = np.linalg.det(M) / 6.0
    g = np.zeros((4, 3))
    g[1:] = np.linalg.inv(M)
    g[0] = -g[1:].sum(axis=0)
    return abs(vol) * (g @ g.T)


def parse_vtk_unstructured(text: str):
    """Minimal independent VTK legacy reader for round-trip checks.

    Returns (points, cells, cell_types, {scalar_name: values}).
    """
    lines = text.splitlines()
    i = 0
    points, cells, cell_types, scalars = None, [], [], {}
    while i < len(lines):
        line = lines[i].strip()
        if line.startswith("POINTS"):
            n = int(line.split()[1])
            vals = []
            i += 1
            while len(vals) < 3 * n:
                vals.extend(float(x) for x in lines[i].split())
                i += 1
            points = np.array(vals).reshape(n, 3)
            continue
        if line.startswith("CELLS"):
            n = int(line.split()[1])
            i += 1
            for _ in range(n):
                row = [int(x) for x in lines[i].split()]
                assert row[0] == len(row) - 1
                cells.append(row[1:])
                i += 1
            continue
        if line.startswith("CELL_TYPES"):
            n = int(line.split()[1])
            i += 1
            for _ in range(n):
                cell_types.append(int(lines[i].strip()))
                i += 1
            continue
        if line.startswith("SCALARS"):
            name = line.split()[1]
            i += 2  # skip LOOKUP_TABLE
            vals = []
            while i < len(lines) and lines[i].strip() and not lines[i][0].isalpha():
                vals.extend(float(x) for x in lines[i].split())
                i += 1
            scalars[name] = np.array(vals)
            continue
        i += 1
    return points, np.array(cells), np.array(cell_types), scalars


def central_difference_grads(forward, arrays, eps=1e-5):
    """Central finite differences of a scalar-valued ``forward()`` w.r.t. a
    list of ndarrays mutated in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = forward()
            flat[i] = orig - eps
            down = forward()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))

"""Volumetric Laplacian assembly on tetrahedral meshes.

Stiffness entries use the per-tet cotangent form: the weight of edge (i, j)
inside a tet is ``l_kl * cot(theta_kl) / 6`` where (k, l) is the opposite
edge, ``l_kl`` its length and ``theta_kl`` the interior dihedral angle along
it. Summed over tets this reproduces the linear-FEM stiffness matrix (the
test suite checks the two constructions against each other). The lumped mass
assigns each vertex a quarter of its adjacent tet volume by default; the
literal all-adjacent-volume convention is available via ``mass_mode``.
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh_io import TetMesh, signed_volumes

# (edge, opposite edge) pairs of a tet's local vertices. k_edge[(a,b)] is
# derived from the dihedral angle along (c,d).
_EDGE_PAIRS = (
    ((0, 1), (2, 3)),
    ((0, 2), (1, 3)),
    ((0, 3), (1, 2)),
    ((1, 2), (0, 3)),
    ((1, 3), (0, 2)),
    ((2, 3), (0, 1)),
)


class AssemblyError(ValueError):
    pass


class EigenSolverError(AssemblyError):
    """Iterative eigensolver failed to converge (numerical, not data)."""


@dataclass(frozen=True)
class SparseMatrix:
    """Compressed-row sparse matrix (thin wrapper over scipy CSR)."""

    csr: sp.csr_matrix

    @property
    def n_rows(self) -> int:
        return self.csr.shape[0]

    @property
    def n_cols(self) -> int:
        return self.csr.shape[1]

    @property
    def row_offsets(self) -> np.ndarray:
        return self.csr.indptr

    @property
    def col_indices(self) -> np.ndarray:
        return self.csr.indices

    @property
    def values(self) -> np.ndarray:
        return self.csr.data

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> "SparseMatrix":
        m = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        if not np.all(np.isfinite(m.data)):
            raise AssemblyError("sparse matrix has non-finite entries")
        return cls(m)

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        m = sp.csr_matrix(np.asarray(dense, dtype=np.float64))
        m.sort_indices()
        return cls(m)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.csr @ x

    def matmat(self, x: np.ndarray) -> np.ndarray:
        return self.csr @ x

    @property
    def csr_t(self) -> sp.csr_matrix:
        """Cached CSR transpose; the reverse pass multiplies by it per call."""
        cached = getattr(self, "_csr_t", None)
        if cached is None:
            cached = self.csr.T.tocsr()
            object.__setattr__(self, "_csr_t", cached)
        return cached

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix(self.csr_t)

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()


@dataclass(frozen=True)
class LboBundle:
    """Precomputed operators for one mesh: stiffness, lumped mass, and the
    Chebyshev-ready scaled Laplacian."""

    stiffness: SparseMatrix
    lumped_mass: np.ndarray
    lambda_max: float
    scaled_laplacian: SparseMatrix
    normalization: str

    def __post_init__(self):
        if self.normalization not in ("symmetric", "random-walk"):
            raise AssemblyError(f"unknown normalization {self.normalization!r}")
        if np.any(self.lumped_mass <= 0):
            raise AssemblyError("lumped mass has non-positive entries")
        if not self.lambda_max > 0:
            raise AssemblyError("lambda_max must be positive")


def element_stiffness(tet_coords: np.ndarray) -> np.ndarray:
    """4x4 stiffness of one tet from edge lengths and dihedral angles.

    Off-diagonal (a, b) carries ``-l_cd * cot(theta_cd) / 6`` for the
    opposite edge (c, d); diagonals make rows sum to zero.
    """
    p = np.asarray(tet_coords, dtype=np.float64)
    if p.shape != (4, 3):
        raise AssemblyError(f"expected 4 points in 3-D, got shape {p.shape}")
    vol = float(np.cross(p[1] - p[0], p[2] - p[0]) @ (p[3] - p[0])) / 6.0
    if abs(vol) < 1e-14 * max(1.0, float(np.abs(p).max()) ** 3):
        raise AssemblyError("degenerate tetrahedron")
    E = np.zeros((4, 4))
    for (a, b), (c, d) in _EDGE_PAIRS:
        hinge = p[d] - p[c]
        length = np.linalg.norm(hinge)
        e_hat = hinge / length
        u = p[a] - p[c]
        v = p[b] - p[c]
        u = u - (u @ e_hat) * e_hat
        v = v - (v @ e_hat) * e_hat
        cot = (u @ v) / np.linalg.norm(np.cross(u, v))
        k = length * cot / 6.0
        E[a, b] = E[b, a] = -k
    E[np.diag_indices(4)] = -E.sum(axis=1)
    return E


def _element_stiffness_batch(vertices, tets):
    """Stacked (m, 4, 4) element matrices, vectorized over tets."""
    E = np.zeros((tets.shape[0], 4, 4))
    p = vertices[tets]  # (m, 4, 3)
    for (a, b), (c, d) in _EDGE_PAIRS:
        hinge = p[:, d] - p[:, c]
        length = np.linalg.norm(hinge, axis=1)
        e_hat = hinge / length[:, None]
        u = p[:, a] - p[:, c]
        v = p[:, b] - p[:, c]
        u = u - np.einsum("ij,ij->i", u, e_hat)[:, None] * e_hat
        v = v - np.einsum("ij,ij->i", v, e_hat)[:, None] * e_hat
        cot = np.einsum("ij,ij->i", u, v) / np.linalg.norm(np.cross(u, v), axis=1)
        k = length * cot / 6.0
        E[:, a, b] = E[:, b, a] = -k
    diag = -E.sum(axis=2)
    for a in range(4):
        E[:, a, a] = diag[:, a]
    return E


def assemble_stiffness(mesh: TetMesh) -> SparseMatrix:
    """Sum element stiffness matrices into a symmetric N x N operator.

    Diagonal entries hold each vertex's total edge weight, off-diagonals the
    negated weights, so rows sum to zero. Poor-quality tets can produce
    negative weights; they are kept as-is (clamping would silently change
    the operator) and flagged with a warning.
    """
    v, t = mesh.vertices, mesh.tets
    vols = signed_volumes(v, t)
    bbox_diag = float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))
    bad = np.abs(vols) < 1e-12 * bbox_diag**3
    if np.any(bad):
        raise AssemblyError(
            f"degenerate tetrahedron at index {int(np.nonzero(bad)[0][0])}"
        )
    E = _element_stiffness_batch(v, t)

    off_diag = np.concatenate([-E[:, a, b] for (a, b), _ in _EDGE_PAIRS])
    if np.any(off_diag < -1e-12 * max(1.0, np.abs(off_diag).max())):
        warnings.warn(
            "mesh has negative cotangent weights (poor-quality tets); "
            "keeping them unclamped",
            RuntimeWarning,
        )

    rows = np.repeat(t, 4, axis=1).reshape(-1)
    cols = np.tile(t, (1, 4)).reshape(-1)
    vals = E.reshape(-1)
    return SparseMatrix.from_coo(rows, cols, vals, (mesh.n_vertices, mesh.n_vertices))


def assemble_lumped_mass(mesh: TetMesh, mass_mode: str = "quarter") -> np.ndarray:
    """Per-vertex lumped mass from adjacent tet volumes.

    ``quarter`` (default) splits each tet's volume evenly over its corners so
    the masses sum to the mesh volume; ``paper-literal`` assigns the full
    adjacent volume to every corner. The two differ only by a global factor
    of 4 in the resulting operator spectrum.
    """
    if mass_mode not in ("quarter", "paper-literal"):
        raise AssemblyError(f"unknown mass_mode {mass_mode!r}")
    vols = signed_volumes(mesh.vertices, mesh.tets)
    if np.any(vols <= 0):
        raise AssemblyError("mesh must be oriented (positive volumes) before lumping")
    share = vols / 4.0 if mass_mode == "quarter" else vols
    mass = np.zeros(mesh.n_vertices)
    np.add.at(mass, mesh.tets.reshape(-1), np.repeat(share, 4))
    if np.any(mass <= 0):
        bad = int(np.nonzero(mass <= 0)[0][0])
        raise AssemblyError(f"vertex {bad} has no adjacent volume (isolated?)")
    return mass


def normalized_laplacian(
    stiffness: SparseMatrix, mass: np.ndarray, mode: str = "symmetric"
) -> SparseMatrix:
    """Mass-normalize the stiffness matrix.

    ``symmetric`` gives D^{-1/2} A D^{-1/2}; ``random-walk`` gives D^{-1} A.
    The two are similar matrices and share their spectrum.
    """
    if np.any(mass <= 0):
        raise AssemblyError("mass entries must be positive")
    A = stiffness.csr
    if mode == "symmetric":
        d = 1.0 / np.sqrt(mass)
        L = sp.diags(d) @ A @ sp.diags(d)
    elif mode == "random-walk":
        L = sp.diags(1.0 / mass) @ A
    else:
        raise AssemblyError(f"unknown normalization mode {mode!r}")
    L = L.tocsr()
    L.sort_indices()
    return SparseMatrix(L)


def estimate_lambda_max(
    L: SparseMatrix, tol: float = 1e-6, max_iter: int = 1000, v0=None
) -> float:
    """Largest-eigenvalue estimate by power iteration, inflated by 1%.

    Overestimation is harmless (it only compresses the Chebyshev domain).
    Falls back to the Gershgorin row bound with a warning if the iteration
    does not converge. ``v0`` sets the start vector; callers that need
    vertex-relabeling consistency pass a geometry-derived one.
    """
    n = L.n_rows
    if v0 is None:
        v = np.random.default_rng(0).standard_normal(n)
    else:
        v = np.asarray(v0, dtype=np.float64).copy()
        if v.shape != (n,) or np.linalg.norm(v) < 1e-300:
            raise AssemblyError("v0 must be a nonzero length-n vector")
    v /= np.linalg.norm(v)
    lam_prev = 0.0
    for _ in range(max_iter):
        y = L.matvec(v)
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            break
        v = y / lam
        if abs(lam - lam_prev) <= tol * max(lam, 1e-300):
            return lam * 1.01
        lam_prev = lam
    gersh = float(np.abs(L.csr).sum(axis=1).max())
    warnings.warn(
        f"power iteration did not converge in {max_iter} iterations; "
        f"using Gershgorin bound {gersh:.6g}",
        RuntimeWarning,
    )
    return gersh


def scale_laplacian(L: SparseMatrix, lambda_max: float) -> SparseMatrix:
    """Affine map (2 / lambda_max) L - I placing the spectrum inside [-1, 1]."""
    if not lambda_max > 0:
        raise AssemblyError("lambda_max must be positive")
    n = L.n_rows
    scaled = ((2.0 / lambda_max) * L.csr - sp.identity(n, format="csr")).tocsr()
    scaled.sort_indices()
    return SparseMatrix(scaled)


def truncated_eigenpairs(L: SparseMatrix, m: int):
    """Smallest-m eigenpairs of the symmetric normalized Laplacian.

    Returns (eigenvalues ascending, eigenvectors as columns), orthonormal.
    Small problems go through a dense solve; larger ones through
    shift-inverted Lanczos with a deterministic start vector.
    """
    n = L.n_rows
    if m > n:
        raise AssemblyError(f"requested {m} eigenpairs from a {n}-vertex operator")
    if n <= 1024 or m > n // 4:
        vals, vecs = np.linalg.eigh(L.to_dense())
        return vals[:m], vecs[:, :m]
    v0 = np.full(n, 1.0 / np.sqrt(n))
    try:
        vals, vecs = spla.eigsh(L.csr, k=m, sigma=0, which="LM", v0=v0)
    except (spla.ArpackNoConvergence, RuntimeError) as exc:
        raise EigenSolverError(f"sparse eigensolver failed: {exc}") from exc
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def build_lbo(
    mesh: TetMesh, normalization: str = "symmetric", mass_mode: str = "quarter"
) -> LboBundle:
    """Assemble stiffness + mass and derive the scaled operator in one go."""
    A = assemble_stiffness(mesh)
    mass = assemble_lumped_mass(mesh, mass_mode=mass_mode)
    L = normalized_laplacian(A, mass, mode=normalization)
    # Geometry-derived start vector keeps the estimate (hence the scaled
    # operator) consistent under vertex relabeling.
    xyz = mesh.vertices
    v0 = 0.5 + xyz @ np.array([1.0, 2.0, 3.0]) + np.einsum("ij,ij->i", xyz, xyz)
    if np.linalg.norm(v0) < 1e-12:
        v0 = None
    lam = estimate_lambda_max(L, v0=v0)
    return LboBundle(
        stiffness=A,
        lumped_mass=mass,
        lambda_max=lam,
        scaled_laplacian=scale_laplacian(L, lam),
        normalization=normalization,
    )


def mesh_content_hash(mesh: TetMesh) -> str:
    """SHA-256 over vertex/tet bytes; cache key for precomputed operators."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.tets).tobytes())
    return h.hexdigest()


def save_lbo(bundle: LboBundle, path) -> None:
    """Persist a bundle as .npz; arrays round-trip bit-exactly."""
    np.savez(
        path,
        stiff_indptr=bundle.stiffness.row_offsets,
        stiff_indices=bundle.stiffness.col_indices,
        stiff_data=bundle.stiffness.values,
        n=np.int64(bundle.stiffness.n_rows),
        lumped_mass=bundle.lumped_mass,
        lambda_max=np.float64(bundle.lambda_max),
        scaled_indptr=bundle.scaled_laplacian.row_offsets,
        scaled_indices=bundle.scaled_laplacian.col_indices,
        scaled_data=bundle.scaled_laplacian.values,
        normalization=np.str_(bundle.normalization),
    )


def load_lbo(path) -> LboBundle:
    with np.load(path, allow_pickle=False) as z:
        n = int(z["n"])
        stiff = sp.csr_matrix(
            (z["stiff_data"], z["stiff_indices"], z["stiff_indptr"]), shape=(n, n)
        )
        scaled = sp.csr_matrix(
            (z["scaled_data"], z["scaled_indices"], z["scaled_indptr"]), shape=(n, n)
        )
        return LboBundle(
            stiffness=SparseMatrix(stiff),
            lumped_mass=z["lumped_mass"],
            lambda_max=float(z["lambda_max"]),
            scaled_laplacian=SparseMatrix(scaled),
            normalization=str(z["normalization"]),
        )

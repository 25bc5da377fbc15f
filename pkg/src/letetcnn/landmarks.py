"""Super-node selection on tetrahedral meshes.

The primary selector runs greedy maximum-posterior-variance search under a
Gaussian process whose prior covariance is a multi-scale heat-diffusion
kernel built from the low spectrum of the normalized Laplacian:

    k(i, j) = sum_s sum_m exp(-lambda_m * t_s) phi_m(i) phi_m(j)

Because all scales share the eigenvectors, the kernel is rank-m with feature
map Phi = phi * sqrt(sum_s exp(-lambda t_s)); the greedy loop works in that
feature space via an incremental Cholesky factor. Farthest-point sampling is
provided as a spectral-free fallback. All tie-breaks go to the lowest index
so selections are reproducible.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .mesh_io import TetMesh

DEFAULT_SCALES = (0.01, 0.1, 1.0)
DEFAULT_EIGENPAIRS = 64


class LandmarkError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionKernelSpec:
    """Diffusion times and spectral truncation for the GP prior."""

    scales: tuple = DEFAULT_SCALES
    n_eigenpairs: int = DEFAULT_EIGENPAIRS

    def __post_init__(self):
        s = tuple(float(t) for t in self.scales)
        if not s or any(t <= 0 for t in s) or list(s) != sorted(s):
            raise LandmarkError(f"scales must be positive ascending, got {s}")
        if self.n_eigenpairs < 2:
            raise LandmarkError("need at least 2 eigenpairs")
        object.__setattr__(self, "scales", s)


@dataclass(frozen=True)
class LandmarkSet:
    """Selected super nodes, in selection order."""

    indices: np.ndarray
    positions: np.ndarray
    method: str
    seed: int
    selection_scores: np.ndarray = field(default=None)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size < 1:
            raise LandmarkError("landmark set must be non-empty")
        if np.unique(idx).size != idx.size:
            raise LandmarkError("landmark indices must be distinct")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.float64))

    def __len__(self) -> int:
        return self.indices.size


def kernel_feature_map(eigenvalues, eigenvectors, spec: DiffusionKernelSpec):
    """(N, m) feature map Phi with k(i, j) = Phi_i . Phi_j."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    phi = np.asarray(eigenvectors, dtype=np.float64)
    gains = np.zeros_like(lam)
    for t in spec.scales:
        gains += np.exp(-lam * t)
    return phi * np.sqrt(gains)[None, :]


def diffusion_kernel_value(i, j, eigenvalues, eigenvectors, spec: DiffusionKernelSpec):
    """Kernel entry between vertices i and j. Symmetric and PSD by construction."""
    Phi = kernel_feature_map(eigenvalues, eigenvectors, spec)
    return float(Phi[i] @ Phi[j])


def gp_greedy_select(
    mesh: TetMesh, eigenvalues, eigenvectors, spec: DiffusionKernelSpec, n: int
) -> LandmarkSet:
    """Pick n vertices by greedy GP posterior-variance maximization.

    The first pick maximizes prior variance k(i, i); each later pick
    maximizes k(i,i) - k_iS K_SS^{-1} k_Si over unselected vertices. A
    numerically singular K_SS gets one jittered retry (1e-10 * trace/|S| on
    the diagonal) before raising.
    """
    N = mesh.n_vertices
    if not 1 <= n <= N:
        raise LandmarkError(f"cannot select {n} landmarks from {N} vertices")
    Phi = kernel_feature_map(eigenvalues, eigenvectors, spec)
    prior_var = np.einsum("ij,ij->i", Phi, Phi)

    selected = np.empty(n, dtype=np.int64)
    scores = np.empty(n)
    var = prior_var.copy()
    # Rows of C are L^{-1} K(S, .) for the Cholesky factor L of K_SS, so the
    # running posterior variance is prior_var - sum of squared C rows.
    C = np.empty((n, N))
    diag = np.empty(n)  # Cholesky diagonal
    jitter = 0.0

    for step in range(n):
        masked = var.copy()
        masked[selected[:step]] = -np.inf
        pick = int(np.argmax(masked))  # argmax takes the lowest index on ties
        selected[step] = pick
        scores[step] = var[pick]

        if step + 1 == n:
            break
        cross = Phi @ Phi[pick]  # K(pick, .)
        if jitter:
            cross = cross.copy()
            cross[pick] += jitter
        resid = cross - C[:step].T @ C[:step, pick] if step else cross
        pivot = resid[pick]
        if pivot <= 0:
            if jitter == 0.0:
                # K_SS effectively singular: restart the factorization once
                # with a small diagonal jitter.
                jitter = 1e-10 * float(prior_var[selected[: step + 1]].sum()) / (step + 1)
                K_sel = Phi[selected[: step + 1]] @ Phi[selected[: step + 1]].T
                K_sel[np.diag_indices(step + 1)] += jitter
                try:
                    Lfac = np.linalg.cholesky(K_sel)
                except np.linalg.LinAlgError as exc:
                    raise LandmarkError(
                        f"kernel matrix singular after jitter at step {step + 1}"
                    ) from exc
                cross_all = Phi[selected[: step + 1]] @ Phi.T
                cross_all[np.arange(step + 1), selected[: step + 1]] += jitter
                C[: step + 1] = _forward_solve(Lfac, cross_all)
                var = prior_var - np.einsum("ij,ij->j", C[: step + 1], C[: step + 1])
                continue
            raise LandmarkError(
                f"kernel matrix singular at step {step + 1} despite jitter"
            )
        diag[step] = np.sqrt(pivot)
        C[step] = resid / diag[step]
        var = var - C[step] ** 2

    return LandmarkSet(
        indices=selected,
        positions=mesh.vertices[selected],
        method="gp-diffusion",
        seed=0,
        selection_scores=scores,
    )


def _forward_solve(L, B):
    """Solve L X = B for lower-triangular L."""
    from scipy.linalg import solve_triangular

    return solve_triangular(L, B, lower=True)


def fps_select(vertices: np.ndarray, n: int, seed: int = 0) -> LandmarkSet:
    """Farthest-point sampling under Euclidean distance.

    Deterministic: starts from the vertex of maximum norm (lowest index on
    ties); the seed is recorded for provenance only.
    """
    pts = np.asarray(vertices, dtype=np.float64)
    N = pts.shape[0]
    if not 1 <= n <= N:
        raise LandmarkError(f"cannot select {n} landmarks from {N} vertices")
    selected = np.empty(n, dtype=np.int64)
    selected[0] = int(np.argmax(np.einsum("ij,ij->i", pts, pts)))
    dist2 = np.einsum("ij,ij->i", pts - pts[selected[0]], pts - pts[selected[0]])
    for step in range(1, n):
        pick = int(np.argmax(dist2))
        selected[step] = pick
        d2 = np.einsum("ij,ij->i", pts - pts[pick], pts - pts[pick])
        np.minimum(dist2, d2, out=dist2)
    return LandmarkSet(
        indices=selected, positions=pts[selected], method="fps", seed=seed
    )


def coverage_radius(vertices: np.ndarray, landmarks: LandmarkSet) -> float:
    """max over vertices of the distance to the nearest landmark."""
    pts = np.asarray(vertices, dtype=np.float64)
    best = np.full(pts.shape[0], np.inf)
    for pos in landmarks.positions:
        d2 = np.einsum("ij,ij->i", pts - pos, pts - pos)
        np.minimum(best, d2, out=best)
    return float(np.sqrt(best.max()))


def save_landmarks(lset: LandmarkSet) -> str:
    """Sidecar text format: method, seed, count, then one index per line."""
    out = io.StringIO()
    out.write(f"method {lset.method}\n")
    out.write(f"seed {lset.seed}\n")
    out.write(f"count {len(lset)}\n")
    for idx in lset.indices:
        out.write(f"{int(idx)}\n")
    return out.getvalue()


def load_landmarks(text: str, mesh: TetMesh) -> LandmarkSet:
    """Parse a sidecar and rebind positions to the given mesh, cross-checking."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if len(lines) < 4:
        raise LandmarkError("truncated landmark sidecar")
    try:
        method = lines[0].split()[1]
        seed = int(lines[1].split()[1])
        count = int(lines[2].split()[1])
        indices = np.array([int(ln) for ln in lines[3:]], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise LandmarkError(f"malformed landmark sidecar: {exc}") from exc
    if indices.size != count:
        raise LandmarkError(
            f"landmark count mismatch: header {count}, found {indices.size}"
        )
    if indices.min() < 0 or indices.max() >= mesh.n_vertices:
        raise LandmarkError("landmark/mesh mismatch: index out of range")
    return LandmarkSet(
        indices=indices, positions=mesh.vertices[indices], method=method, seed=seed
    )

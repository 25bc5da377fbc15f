"""Synthetic labeled datasets: jittered ball meshes with a planted
class-dependent surface dent and a correlated scalar biomarker.

Label-1 meshes get an inward Gaussian dent at a random surface vertex;
label-0 meshes are undeformed. Both receive isotropic vertex noise, so the
only systematic geometric difference is the dent. The biomarker is drawn
from class-conditional unit-variance Gaussians and is independent of the
mesh given the label, which is what makes fusion gains measurable. Risk
strata (low/medium/high) come from the theoretical 5th/95th percentile
crossover band of the two Gaussians, mirroring a two-threshold
sensitivity/specificity rule.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.stats import norm

from .landmarks import DiffusionKernelSpec
from .mesh_io import (
    TetMesh,
    load_mesh,
    normalize_mesh,
    signed_volumes,
    validate_and_orient,
    write_ele_file,
    write_node_file,
)
from .model import MeshSample, prepare_sample

# Kuhn subdivision: six tets per cube sharing the main diagonal (0,0,0)-(1,1,1).
_CUBE_TETS = (
    (0, 1, 3, 7),
    (0, 1, 5, 7),
    (0, 2, 3, 7),
    (0, 2, 6, 7),
    (0, 4, 5, 7),
    (0, 4, 6, 7),
)
_CORNER_OFFSETS = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_per_class: int = 40
    grid_resolution: int = 8
    bump_amplitude: float = 0.15
    bump_radius: float = 0.8
    biomarker_separation: float = 1.8
    noise_scale: float = 0.003
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise SynthError("n_per_class must be >= 1")
        if self.grid_resolution < 4:
            raise SynthError("grid_resolution must be >= 4")
        if not 0.0 < self.bump_amplitude < 0.5:
            raise SynthError("bump_amplitude must lie in (0, 0.5)")
        if self.bump_radius <= 0 or self.noise_scale <= 0:
            raise SynthError("bump_radius and noise_scale must be positive")
        if self.biomarker_separation < 0:
            raise SynthError("biomarker_separation must be non-negative")


def _is_connected(n_vertices, tets) -> bool:
    rows, cols = [], []
    for a in range(4):
        for b in range(a + 1, 4):
            rows.append(tets[:, a])
            cols.append(tets[:, b])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    adj = coo_matrix(
        (np.ones(rows.size), (rows, cols)), shape=(n_vertices, n_vertices)
    )
    n_comp, _ = connected_components(adj, directed=False)
    return n_comp == 1


def generate_ball_mesh(spec: SynthSpec, seed=None) -> TetMesh:
    """Unit-ball mesh: cube cells whose centers fall inside the ball, each
    split into six tets, vertices jittered by 0.1 x cell size."""
    res = spec.grid_resolution
    h = 2.0 / res
    vert_ids: dict[tuple, int] = {}
    coords = []
    tets = []

    def vid(key):
        i = vert_ids.get(key)
        if i is None:
            i = len(coords)
            vert_ids[key] = i
            coords.append((-1.0 + key[0] * h, -1.0 + key[1] * h, -1.0 + key[2] * h))
        return i

    for ix in range(res):
        for iy in range(res):
            for iz in range(res):
                center = np.array(
                    [-1.0 + (ix + 0.5) * h, -1.0 + (iy + 0.5) * h, -1.0 + (iz + 0.5) * h]
                )
                if center @ center > 1.0:
                    continue
                corner_ids = [
                    vid((ix + a, iy + b, iz + c)) for a, b, c in _CORNER_OFFSETS
                ]
                for tet in _CUBE_TETS:
                    tets.append([corner_ids[v] for v in tet])

    if not tets:
        raise SynthError(f"grid_resolution {res} yields no cells inside the ball")
    vertices = np.array(coords, dtype=np.float64)
    tet_arr = np.array(tets, dtype=np.int64)
    if not _is_connected(vertices.shape[0], tet_arr):
        raise SynthError(f"grid_resolution {res} too low: mesh is disconnected")

    # Jitter by 0.1 x cell size through a smooth random displacement field
    # (a few random plane waves per coordinate). A smooth field breaks the
    # grid symmetry like iid jitter would, but keeps cell volumes nearly
    # uniform, so planted compressions stay the dominant local signal.
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    amplitude = 0.1 * h
    for axis in range(3):
        wavevec = rng.normal(0.0, 2.0, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        vertices[:, axis] += amplitude * np.sin(vertices @ wavevec + phase)

    mesh, _ = validate_and_orient(TetMesh(vertices, tet_arr))
    mesh, _ = normalize_mesh(mesh)
    return mesh


def apply_class_deformation(mesh: TetMesh, label: int, spec: SynthSpec, seed):
    """Dent label-1 meshes inward at a seeded surface vertex; add noise to
    both classes. Returns (mesh, boolean mask of strongly-displaced vertices).

    The dent direction and the vertex noise use independent child streams, so
    the two labels under one seed differ exactly by the dent.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    dent_seed, noise_seed = ss.spawn(2)
    v = mesh.vertices.copy()
    mask = np.zeros(v.shape[0], dtype=bool)

    if label == 1:
        dent_rng = np.random.default_rng(dent_seed)
        direction = dent_rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        center = v[int(np.argmax(v @ direction))]
        d2 = np.einsum("ij,ij->i", v - center, v - center)
        magnitude = spec.bump_amplitude * np.exp(-d2 / spec.bump_radius**2)
        mask = magnitude > 0.1 * spec.bump_amplitude
        radii = np.linalg.norm(v, axis=1)
        safe = radii > 1e-12
        v[safe] -= (magnitude[safe] / radii[safe])[:, None] * v[safe]

    v += np.random.default_rng(noise_seed).normal(0.0, spec.noise_scale, size=v.shape)

    deformed = TetMesh(v, mesh.tets)
    if np.any(signed_volumes(v, mesh.tets) <= 0):
        raise SynthError(
            "amplitude too large: deformation inverted a tetrahedron"
        )
    return deformed, mask


def generate_biomarker(label: int, spec: SynthSpec, seed) -> float:
    """Class-conditional Gaussian draw, mean +-separation/2, unit variance."""
    rng = np.random.default_rng(seed)
    mean = (spec.biomarker_separation / 2.0) * (1 if label == 1 else -1)
    return float(rng.normal(mean, 1.0))


def stratum_band(spec: SynthSpec):
    """(lo, hi) crossover band: class-1 5th percentile to class-0 95th."""
    z95 = float(norm.ppf(0.95))
    lo = spec.biomarker_separation / 2.0 - z95
    hi = z95 - spec.biomarker_separation / 2.0
    return lo, hi


def stratum_of(biomarker: float, spec: SynthSpec) -> str:
    lo, hi = stratum_band(spec)
    if biomarker < lo:
        return "low"
    if biomarker > hi:
        return "high"
    return "medium"


@dataclass
class RawSample:
    """Generated mesh + metadata, before operator precomputation."""

    sample_id: str
    mesh: TetMesh
    label: int
    biomarker: float
    stratum: str
    mask: np.ndarray


def generate_raw(spec: SynthSpec):
    """Generate deformed meshes and biomarkers for 2 x n_per_class samples.

    Per-sample RNG streams derive from (seed, sample index), so any sample is
    reproducible in isolation.
    """
    raw = []
    n_total = 2 * spec.n_per_class
    children = np.random.SeedSequence(spec.seed).spawn(n_total)
    for i in range(n_total):
        label = 0 if i < spec.n_per_class else 1
        mesh_seed, deform_seed, marker_seed = children[i].spawn(3)
        mesh = generate_ball_mesh(spec, seed=mesh_seed)
        mesh, mask = apply_class_deformation(mesh, label, spec, deform_seed)
        biomarker = generate_biomarker(label, spec, marker_seed)
        raw.append(
            RawSample(
                sample_id=f"sample_{i:03d}",
                mesh=mesh,
                label=label,
                biomarker=biomarker,
                stratum=stratum_of(biomarker, spec),
                mask=mask,
            )
        )
    return raw


def build_dataset(
    spec: SynthSpec,
    n_landmarks: int = 64,
    landmark_method: str = "gp-diffusion",
    kernel_spec: DiffusionKernelSpec | None = None,
):
    """Generate 2 x n_per_class fully-preprocessed samples plus stratum tags."""
    samples, strata = [], []
    for raw in generate_raw(spec):
        sample = prepare_sample(
            raw.mesh,
            label=raw.label,
            biomarker=raw.biomarker,
            n_landmarks=n_landmarks,
            landmark_method=landmark_method,
            kernel_spec=kernel_spec,
            sample_id=raw.sample_id,
            deformation_mask=raw.mask,
        )
        samples.append(sample)
        strata.append(raw.stratum)
    return samples, strata


def write_dataset(raw_samples, spec: SynthSpec, out_dir) -> Path:
    """Write .node/.ele pairs plus a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for raw in raw_samples:
        sid = raw.sample_id
        (out / f"{sid}.node").write_text(write_node_file(raw.mesh.vertices))
        (out / f"{sid}.ele").write_text(write_ele_file(raw.mesh.tets))
        records.append(
            {
                "id": sid,
                "label": raw.label,
                "biomarker": raw.biomarker,
                "stratum": raw.stratum,
                "node": f"{sid}.node",
                "ele": f"{sid}.ele",
                "mask": [int(j) for j in np.nonzero(raw.mask)[0]],
            }
        )
    manifest = {
        "kind": "letetcnn-dataset",
        "spec": asdict(spec),
        "samples": records,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise SynthError(f"no manifest.json under {data_dir}")
    manifest = json.loads(path.read_text())
    if manifest.get("kind") != "letetcnn-dataset":
        raise SynthError(f"{path} is not a dataset manifest")
    return manifest


def load_dataset(
    data_dir,
    n_landmarks: int = 64,
    landmark_method: str = "gp-diffusion",
    kernel_spec: DiffusionKernelSpec | None = None,
    prepare=None,
):
    """Load a written dataset and run the preprocessing pipeline per sample.

    ``prepare`` can override sample preparation (the CLI injects a cached
    variant). Returns (samples, strata).
    """
    manifest = read_manifest(data_dir)
    base = Path(data_dir)
    prepare = prepare or (
        lambda mesh, rec: prepare_sample(
            mesh,
            label=rec["label"],
            biomarker=rec["biomarker"],
            n_landmarks=n_landmarks,
            landmark_method=landmark_method,
            kernel_spec=kernel_spec,
            sample_id=rec["id"],
            deformation_mask=None,
        )
    )
    samples, strata = [], []
    for rec in manifest["samples"]:
        mesh = load_mesh(base / rec["node"], base / rec["ele"])
        sample = prepare(mesh, rec)
        if rec.get("mask"):
            mask = np.zeros(sample.mesh.n_vertices, dtype=bool)
            mask[np.asarray(rec["mask"], dtype=int)] = True
            sample.deformation_mask = mask
        samples.append(sample)
        strata.append(rec["stratum"])
    return samples, strata

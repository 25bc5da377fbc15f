import numpy as np
import pytest

from letetcnn.autodiff import Tensor
from letetcnn.autodiff import segment_mean
from letetcnn.landmarks import LandmarkSet, fps_select
from letetcnn.mesh_io import TetMesh, VertexField, write_vtk_scalar
from letetcnn.patches import (
    PatchError,
    assign_patches,
    build_radius_graph,
    patch_label_field,
)

from conftest import parse_vtk_unstructured, random_blob_mesh


def landmarks_at(vertices, indices):
    return LandmarkSet(
        indices=np.asarray(indices),
        positions=np.asarray(vertices)[np.asarray(indices)],
        method="fps",
        seed=0,
    )


class TestAssignPatches:
    def test_single_landmark_takes_all(self, small_random_mesh):
        lms = landmarks_at(small_random_mesh.vertices, [3])
        pa = assign_patches(small_random_mesh.vertices, lms)
        assert pa.n_patches == 1
        assert np.all(pa.labels == 0)
        assert pa.sizes.tolist() == [small_random_mesh.n_vertices]

    def test_tie_breaks_to_lower_ordinal(self):
        verts = np.array(
            [[-1.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0], [0.0, 1, 0], [0.0, 0, 1],
             [0.5, 0.5, 0.5]]
        )
        lms = landmarks_at(verts, [0, 1])
        pa = assign_patches(verts, lms)
        # vertex 2 is exactly equidistant to landmarks 0 and 1
        assert pa.labels[2] == 0

    def test_matches_brute_force_scan(self):
        mesh = random_blob_mesh(150, seed=55)
        lms = fps_select(mesh.vertices, 8)
        pa = assign_patches(mesh.vertices, lms)
        d = np.linalg.norm(
            mesh.vertices[:, None, :] - lms.positions[None, :, :], axis=2
        )
        expected = np.argmin(d, axis=1)
        expected[lms.indices] = np.arange(8)
        assert np.array_equal(pa.labels, expected)

    def test_supernode_owns_its_patch(self):
        mesh = random_blob_mesh(60, seed=56)
        lms = fps_select(mesh.vertices, 12)
        pa = assign_patches(mesh.vertices, lms)
        assert np.array_equal(pa.labels[lms.indices], np.arange(12))
        assert np.all(pa.sizes >= 1)
        assert pa.sizes.sum() == mesh.n_vertices

    def test_centers_are_supernode_positions(self):
        mesh = random_blob_mesh(40, seed=57)
        lms = fps_select(mesh.vertices, 5)
        pa = assign_patches(mesh.vertices, lms)
        assert np.array_equal(pa.centers, lms.positions)

    def test_permutation_consistency(self):
        mesh = random_blob_mesh(50, seed=58)
        lms = fps_select(mesh.vertices, 6)
        pa = assign_patches(mesh.vertices, lms)

        rng = np.random.default_rng(59)
        perm = rng.permutation(mesh.n_vertices)
        inv = np.argsort(perm)
        verts_p = mesh.vertices[perm]
        lms_p = landmarks_at(verts_p, inv[lms.indices])
        pa_p = assign_patches(verts_p, lms_p)
        assert np.array_equal(pa_p.labels, pa.labels[perm])


class TestPooling:
    def test_constant_features_pool_to_constant(self):
        mesh = random_blob_mesh(30, seed=60)
        lms = fps_select(mesh.vertices, 4)
        pa = assign_patches(mesh.vertices, lms)
        x = Tensor(np.full((mesh.n_vertices, 3), 2.5))
        pooled = segment_mean(x, pa.labels, pa.n_patches)
        assert np.allclose(pooled.data, 2.5)

    def test_two_row_mean(self):
        x = Tensor(np.array([[2.0, 10.0], [4.0, 20.0]]))
        pooled = segment_mean(x, np.array([0, 0]), 1)
        assert np.allclose(pooled.data, [[3.0, 15.0]])

    def test_singleton_patches_identity(self):
        x = Tensor(np.arange(12, dtype=float).reshape(4, 3))
        pooled = segment_mean(x, np.arange(4), 4)
        assert np.array_equal(pooled.data, x.data)

    def test_gradient_of_sum_is_inverse_patch_size(self):
        # d(sum of pooled entries)/dx_{i,c} = 1 / |patch(i)| exactly.
        from letetcnn import autodiff as ad

        rng = np.random.default_rng(61)
        x = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
        labels = np.array([0, 0, 1, 1, 1])
        pooled = ad.segment_mean(x, labels, 2)
        total = ad.dot(
            ad.mean_rows(pooled), Tensor(np.full(2, 2.0))
        )  # = sum of pooled entries
        total.backward()
        expected = np.array([0.5, 0.5, 1 / 3, 1 / 3, 1 / 3])[:, None] * np.ones((1, 2))
        assert np.allclose(x.grad, expected, atol=1e-15)

    def test_gradient_matches_finite_differences(self):
        from letetcnn import autodiff as ad
        from conftest import central_difference_grads

        rng = np.random.default_rng(62)
        data = rng.standard_normal((6, 3))
        labels = np.array([0, 1, 1, 2, 2, 2])
        w = rng.standard_normal(3)

        def forward():
            pooled = ad.segment_mean(Tensor(data), labels, 3)
            return float(ad.dot(ad.mean_rows(pooled), Tensor(w)).data)

        (fd,) = central_difference_grads(forward, [data])
        x = Tensor(data, requires_grad=True)
        out = ad.dot(ad.mean_rows(ad.segment_mean(x, labels, 3)), Tensor(w))
        out.backward()
        assert np.abs(x.grad - fd).max() < 1e-6 * max(1.0, np.abs(fd).max())


class TestRadiusGraph:
    def test_pair_within_radius(self):
        centers = np.array([[0.0, 0, 0], [0.4, 0, 0]])
        t, s = build_radius_graph(centers, 0.5)
        edges = set(zip(t.tolist(), s.tolist()))
        assert edges == {(0, 0), (0, 1), (1, 0), (1, 1)}

    def test_pair_outside_radius_self_loops_only(self):
        centers = np.array([[0.0, 0, 0], [0.6, 0, 0]])
        t, s = build_radius_graph(centers, 0.5)
        edges = set(zip(t.tolist(), s.tolist()))
        assert edges == {(0, 0), (1, 1)}

    def test_matches_brute_force_threshold_scan(self):
        rng = np.random.default_rng(62)
        centers = rng.uniform(-1, 1, size=(64, 3))
        t, s = build_radius_graph(centers, 0.5)
        edges = set(zip(t.tolist(), s.tolist()))
        expected = set()
        for i in range(64):
            for j in range(64):
                if i == j or np.linalg.norm(centers[i] - centers[j]) <= 0.5:
                    expected.add((i, j))
        assert edges == expected

    def test_sorted_by_target_then_source(self):
        rng = np.random.default_rng(63)
        centers = rng.uniform(-1, 1, size=(20, 3))
        t, s = build_radius_graph(centers, 0.8)
        order = np.lexsort((s, t))
        assert np.array_equal(order, np.arange(t.size))

    def test_symmetric_relation(self):
        rng = np.random.default_rng(64)
        centers = rng.uniform(-1, 1, size=(30, 3))
        t, s = build_radius_graph(centers, 0.6)
        edges = set(zip(t.tolist(), s.tolist()))
        assert all((j, i) in edges for i, j in edges)

    def test_edge_count_monotone_in_radius(self):
        rng = np.random.default_rng(65)
        centers = rng.uniform(-1, 1, size=(40, 3))
        counts = [build_radius_graph(centers, r)[0].size for r in (0.2, 0.4, 0.8, 1.6)]
        assert counts == sorted(counts)

    def test_positive_radius_required(self):
        with pytest.raises(PatchError):
            build_radius_graph(np.zeros((2, 3)), 0.0)


class TestVtkLabelExport:
    def test_labels_export_as_integers(self):
        mesh = random_blob_mesh(25, seed=66)
        lms = fps_select(mesh.vertices, 3)
        pa = assign_patches(mesh.vertices, lms)
        text = write_vtk_scalar(mesh, VertexField(patch_label_field(pa)), "patch")
        assert "SCALARS patch int 1" in text
        _, _, _, scalars = parse_vtk_unstructured(text)
        assert np.array_equal(scalars["patch"].astype(int), pa.labels)

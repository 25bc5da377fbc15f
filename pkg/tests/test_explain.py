import numpy as np
import pytest

from letetcnn.explain import (
    ExplainError,
    Heatmap,
    export_heatmap,
    gradcam,
    heat_mass_in_mask,
)
from letetcnn.landmarks import LandmarkSet
from letetcnn.mesh_io import TetMesh
from letetcnn.model import Model, ModelConfig, prepare_sample

from conftest import parse_vtk_unstructured, random_blob_mesh
from test_model import tiny_mcfg, tiny_sample


class TestGradcam:
    def test_zero_head_gives_zero_map_with_warning(self):
        sample = tiny_sample(seed=30)
        model = Model(tiny_mcfg(), seed=31)
        model.params["head.w"].data[...] = 0.0
        model.params["head.b"].data = np.array(0.0)
        with pytest.warns(RuntimeWarning, match="all-zero"):
            hm = gradcam(sample, model)
        assert np.all(hm.values == 0)

    def test_values_in_unit_interval_with_peak_one(self):
        sample = tiny_sample(seed=32)
        model = Model(tiny_mcfg(), seed=33)
        hm = gradcam(sample, model)
        assert hm.values.min() >= 0.0
        assert hm.values.max() == pytest.approx(1.0)
        assert hm.values.size == sample.mesh.n_vertices

    def test_le_variant_rejected(self):
        sample = tiny_sample(seed=34)
        model = Model(tiny_mcfg(variant="le"), seed=35)
        with pytest.raises(ExplainError, match="no convolutional feature map"):
            gradcam(sample, model)

    def test_positive_logit_scaling_invariance(self):
        sample = tiny_sample(seed=36)
        model = Model(tiny_mcfg(), seed=37)
        hm1 = gradcam(sample, model)
        model.params["head.w"].data = model.params["head.w"].data * 5.0
        model.params["head.b"].data = np.asarray(model.params["head.b"].data * 5.0)
        hm2 = gradcam(sample, model)
        assert np.abs(hm1.values - hm2.values).max() < 1e-9

    def test_vertex_permutation_equivariance(self):
        sample = tiny_sample(seed=38)
        model = Model(tiny_mcfg(), seed=39)
        hm = gradcam(sample, model)

        rng = np.random.default_rng(40)
        perm = rng.permutation(sample.mesh.n_vertices)
        inv = np.argsort(perm)
        mesh_p = TetMesh(sample.mesh.vertices[perm], inv[sample.mesh.tets])
        lms_p = LandmarkSet(
            indices=inv[sample.landmarks.indices],
            positions=sample.landmarks.positions,
            method=sample.landmarks.method,
            seed=sample.landmarks.seed,
        )
        sample_p = prepare_sample(
            mesh_p, label=sample.label, landmark_set=lms_p, sample_id="perm"
        )
        hm_p = gradcam(sample_p, model)
        assert np.abs(hm_p.values - hm.values[perm]).max() < 1e-9

    def test_gradients_do_not_leak_into_params(self):
        sample = tiny_sample(seed=41)
        model = Model(tiny_mcfg(), seed=42)
        gradcam(sample, model)
        assert all(
            model.params[n].grad is None for n in model.params.names()
        )


class TestHeatmapType:
    def test_range_validated(self):
        with pytest.raises(ExplainError):
            Heatmap(values=np.array([0.0, 1.5]), layer="conv0")

    def test_shape_validated(self):
        with pytest.raises(ExplainError):
            Heatmap(values=np.zeros((3, 2)), layer="conv0")


class TestExportAndMask:
    def test_export_round_trip(self, tmp_path):
        sample = tiny_sample(seed=43)
        model = Model(tiny_mcfg(), seed=44)
        hm = gradcam(sample, model)
        path = tmp_path / "heat.vtk"
        export_heatmap(sample.mesh, hm, path)
        text = path.read_text()
        assert "SCALARS gradcam float 1" in text
        _, cells, _, scalars = parse_vtk_unstructured(text)
        assert np.array_equal(cells, sample.mesh.tets)
        assert np.allclose(scalars["gradcam"], hm.values, atol=0)

    def test_heat_mass_fraction(self):
        hm = Heatmap(values=np.array([1.0, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                                      0.0, 0.0]), layer="conv0")
        mask = np.zeros(10, dtype=bool)
        mask[0] = True
        # top decile of 10 values = 1 value (the peak), inside the mask
        assert heat_mass_in_mask(hm, mask, top_fraction=0.1) == 1.0
        assert heat_mass_in_mask(hm, ~mask, top_fraction=0.1) == 0.0

    def test_mask_length_checked(self):
        hm = Heatmap(values=np.zeros(4), layer="conv0")
        with pytest.raises(ExplainError):
            heat_mass_in_mask(hm, np.zeros(5, dtype=bool))

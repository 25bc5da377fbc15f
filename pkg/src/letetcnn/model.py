"""Full classifier pipeline: configuration, sample preparation, the forward
pass across variants, training with gradient accumulation, evaluation
metrics, and the clinical threshold rules.

Variants:
  * ``letetcnn``  coordinates -> pointwise MLP -> spectral convolutions ->
                  patch pooling -> radius-graph attention -> global pool
  * ``tetcnn``    same without the attention layers
  * ``le``        a single affine coordinate projection feeds the patch
                  pooling and attention directly (no convolutions)

An optional biomarker scalar is z-scored with training-split statistics and
concatenated to the pooled embedding before the affine head.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .landmarks import (
    DiffusionKernelSpec,
    LandmarkSet,
    fps_select,
    gp_greedy_select,
)
from .lbo import LboBundle, build_lbo, truncated_eigenpairs
from .mesh_io import TetMesh, normalize_mesh, validate_and_orient
from .patches import PatchAssignment, assign_patches, build_radius_graph

VARIANTS = ("letetcnn", "le", "tetcnn")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 128
    n_tetcnn_layers: int = 2
    n_transformer_layers: int = 2
    cheb_order: int = 3
    radius: float = 0.5
    n_landmarks: int = 64
    variant: str = "letetcnn"
    fuse_biomarker: bool = False
    scalar_attention: bool = False
    positional_values: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("hidden_dim", "n_transformer_layers", "n_landmarks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_tetcnn_layers < 0 or self.cheb_order < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.radius <= 0:
            raise ConfigError("radius must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 500
    micro_batch: int = 2
    accumulation_steps: int = 4
    seed: int = 0
    precision: str = "float64"

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.epochs < 1 or self.micro_batch < 1 or self.accumulation_steps < 1:
            raise ConfigError("epochs, micro_batch, accumulation_steps must be >= 1")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"unknown precision {self.precision!r}")


@dataclass
class MeshSample:
    """One training unit: normalized mesh, precomputed operators, label."""

    mesh: TetMesh
    lbo: LboBundle
    landmarks: LandmarkSet
    patches: PatchAssignment
    label: int
    biomarker: float | None = None
    deformation_mask: np.ndarray | None = None
    sample_id: str = ""

    def __post_init__(self):
        n = self.mesh.n_vertices
        if self.lbo.stiffness.n_rows != n or self.patches.labels.size != n:
            raise ConfigError(f"sample {self.sample_id!r}: component sizes disagree")
        if self.label not in (0, 1):
            raise ConfigError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class Metrics:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def sensitivity(self) -> float | None:
        pos = self.tp + self.fn
        return self.tp / pos if pos else None

    @property
    def specificity(self) -> float | None:
        neg = self.tn + self.fp
        return self.tn / neg if neg else None

    @classmethod
    def from_predictions(cls, labels, predictions) -> "Metrics":
        labels = np.asarray(labels, dtype=int)
        preds = np.asarray(predictions, dtype=int)
        if labels.size == 0:
            raise ConfigError("cannot compute metrics on an empty set")
        return cls(
            tp=int(np.sum((labels == 1) & (preds == 1))),
            tn=int(np.sum((labels == 0) & (preds == 0))),
            fp=int(np.sum((labels == 0) & (preds == 1))),
            fn=int(np.sum((labels == 1) & (preds == 0))),
        )


def pipeline_mesh(mesh: TetMesh, gauge_tolerance: float = 0.05) -> TetMesh:
    """Orient, then normalize unless already within the unit gauge.

    Meshes whose centroid sits within ``gauge_tolerance`` of the origin and
    whose max radius is within ``gauge_tolerance`` of 1 are used as-is:
    synthetic deformations are applied to normalized meshes on purpose, and
    recentring them again would smear the planted local signal into a global
    frame offset.
    """
    mesh, _ = validate_and_orient(mesh)
    centroid = mesh.vertices.mean(axis=0)
    max_radius = float(np.linalg.norm(mesh.vertices - centroid, axis=1).max())
    if not (
        np.linalg.norm(centroid) <= gauge_tolerance
        and abs(max_radius - 1.0) <= gauge_tolerance
    ):
        mesh, _ = normalize_mesh(mesh)
    return mesh


def prepare_sample(
    mesh: TetMesh,
    label: int,
    biomarker: float | None = None,
    n_landmarks: int = 64,
    landmark_method: str = "gp-diffusion",
    kernel_spec: DiffusionKernelSpec | None = None,
    normalization: str = "symmetric",
    mass_mode: str = "quarter",
    lbo_bundle: LboBundle | None = None,
    landmark_set: LandmarkSet | None = None,
    sample_id: str = "",
    deformation_mask=None,
    gauge_tolerance: float = 0.05,
) -> MeshSample:
    """Run the per-mesh pipeline: orient, normalize, operators, landmarks,
    patches. Precomputed pieces can be injected (cache path)."""
    mesh = pipeline_mesh(mesh, gauge_tolerance)
    bundle = lbo_bundle if lbo_bundle is not None else build_lbo(
        mesh, normalization=normalization, mass_mode=mass_mode
    )
    if landmark_set is None:
        if landmark_method == "gp-diffusion":
            spec = kernel_spec or DiffusionKernelSpec(
                n_eigenpairs=min(64, mesh.n_vertices)
            )
            m = min(spec.n_eigenpairs, mesh.n_vertices)
            # Eigenpairs come from the unscaled symmetric operator regardless
            # of the bundle's own normalization mode.
            from .lbo import normalized_laplacian

            L = normalized_laplacian(bundle.stiffness, bundle.lumped_mass, "symmetric")
            vals, vecs = truncated_eigenpairs(L, m)
            landmark_set = gp_greedy_select(mesh, vals, vecs, spec, n_landmarks)
        elif landmark_method == "fps":
            landmark_set = fps_select(mesh.vertices, n_landmarks)
        else:
            raise ConfigError(f"unknown landmark method {landmark_method!r}")
    patches = assign_patches(mesh.vertices, landmark_set)
    return MeshSample(
        mesh=mesh,
        lbo=bundle,
        landmarks=landmark_set,
        patches=patches,
        label=label,
        biomarker=biomarker,
        deformation_mask=deformation_mask,
        sample_id=sample_id,
    )


class Model:
    """Parameter container plus the variant-dispatched forward pass."""

    def __init__(self, mcfg: ModelConfig, seed: int = 0, dtype=None):
        self.mcfg = mcfg
        self.dtype = dtype or np.float64
        self.biomarker_mean = 0.0
        self.biomarker_std = 1.0
        self.params = nn.ParamSet()
        rng = np.random.default_rng(seed)
        d = mcfg.hidden_dim

        if mcfg.variant == "le":
            self.projection = nn.LinearProjection(
                self.params, "proj", 3, d, rng, self.dtype
            )
            self.mlp, self.convs = None, []
        else:
            self.mlp = nn.PointwiseMlp(self.params, "mlp", 3, d, rng, self.dtype)
            self.convs = [
                nn.ChebConv(self.params, f"conv{i}", d, d, mcfg.cheb_order, rng,
                            self.dtype)
                for i in range(mcfg.n_tetcnn_layers)
            ]
            self.projection = None

        if mcfg.variant in ("letetcnn", "le"):
            self.transformers = [
                nn.PointTransformer(
                    self.params, f"attn{i}", d, rng,
                    scalar_attention=mcfg.scalar_attention,
                    positional_values=mcfg.positional_values,
                    dtype=self.dtype,
                )
                for i in range(mcfg.n_transformer_layers)
            ]
        else:
            self.transformers = []

        head_in = d + (1 if mcfg.fuse_biomarker else 0)
        self.head_w = self.params.create("head.w", (head_in,), rng, head_in, 1,
                                         self.dtype)
        self.head_b = self.params.create("head.b", (), rng, dtype=self.dtype)

    def set_biomarker_stats(self, mean: float, std: float):
        if not np.isfinite(mean) or not np.isfinite(std) or std <= 0:
            raise ConfigError("biomarker statistics must be finite with std > 0")
        self.biomarker_mean = float(mean)
        self.biomarker_std = float(std)

    def forward(self, sample: MeshSample, tap_features: bool = False):
        """Return (logit tensor, taps dict). ``taps['conv']`` holds the last
        convolution stage output when requested (Grad-CAM target)."""
        coords = Tensor(sample.mesh.vertices.astype(self.dtype))
        taps = {}

        if self.mcfg.variant == "le":
            x = self.projection.forward(coords)
        else:
            x = self.mlp.forward(coords)
            for conv in self.convs:
                x = ad.relu(conv.forward(x, sample.lbo.scaled_laplacian))
            if tap_features:
                x.requires_grad = True
                taps["conv"] = x

        tokens = ad.segment_mean(x, sample.patches.labels, sample.patches.n_patches)

        if self.transformers:
            targets, sources = build_radius_graph(
                sample.patches.centers, self.mcfg.radius
            )
            for layer in self.transformers:
                tokens = layer.forward(tokens, sample.patches.centers, targets, sources)

        h = nn.global_mean_pool(tokens)

        if self.mcfg.fuse_biomarker:
            if sample.biomarker is None:
                raise ConfigError(
                    f"sample {sample.sample_id!r} has no biomarker but fusion is on"
                )
            z = (float(sample.biomarker) - self.biomarker_mean) / self.biomarker_std
            h = ad.concat1d(h, Tensor(np.array([z], dtype=self.dtype)))

        logit = ad.add(ad.dot(h, self.head_w), self.head_b)
        return logit, taps

    def predict_proba(self, sample: MeshSample) -> float:
        logit, _ = self.forward(sample)
        return ad.sigmoid_value(logit)

    def fingerprint(self) -> str:
        cfg = asdict(self.mcfg)
        cfg["biomarker_mean"] = self.biomarker_mean
        cfg["biomarker_std"] = self.biomarker_std
        cfg["precision"] = np.dtype(self.dtype).name
        return json.dumps(cfg, sort_keys=True)

    def save(self, path):
        arrays = {f"param.{k}": v for k, v in self.params.state_dict().items()}
        np.savez(path, __config__=np.str_(self.fingerprint()), **arrays)

    @classmethod
    def load(cls, path) -> "Model":
        with np.load(path, allow_pickle=False) as z:
            cfg = json.loads(str(z["__config__"]))
            dtype = np.dtype(cfg.pop("precision"))
            mean = cfg.pop("biomarker_mean")
            std = cfg.pop("biomarker_std")
            model = cls(ModelConfig(**cfg), seed=0, dtype=dtype)
            model.biomarker_mean = mean
            model.biomarker_std = std
            state = {
                k[len("param."):]: z[k] for k in z.files if k.startswith("param.")
            }
            model.params.load_state_dict(state)
        return model


def forward(sample: MeshSample, model: Model):
    """Functional alias used by callers that treat the model as opaque."""
    logit, _ = model.forward(sample)
    return logit


def split_dataset(samples, seed: int, fractions=(0.7, 0.15, 0.15)):
    """Stratified-by-label index split into (train, val, test)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD5]))
    labels = np.array([s.label for s in samples])
    train_idx, val_idx, test_idx = [], [], []
    for cls in (0, 1):
        idx = np.nonzero(labels == cls)[0]
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(fractions[0] * idx.size))
        n_val = int(round(fractions[1] * idx.size))
        train_idx.extend(idx[:n_train])
        val_idx.extend(idx[n_train : n_train + n_val])
        test_idx.extend(idx[n_train + n_val :])
    return sorted(train_idx), sorted(val_idx), sorted(test_idx)


@dataclass
class TrainResult:
    model: Model
    history: list
    best_epoch: int
    split: tuple


def train(dataset, mcfg: ModelConfig, tcfg: TrainConfig) -> TrainResult:
    """Deterministic single-threaded training loop.

    Splits 70/15/15 stratified by label, optimizes BCE with Adam and
    gradient accumulation, and returns the best-validation-accuracy
    checkpoint. History rows carry (epoch, mean train loss, train accuracy,
    validation accuracy).
    """
    split = split_dataset(dataset, tcfg.seed)
    train_set = [dataset[i] for i in split[0]]
    val_set = [dataset[i] for i in split[1]]
    labels = [s.label for s in train_set]
    if min(labels.count(0), labels.count(1)) < 2:
        raise TrainingError("need at least 2 training samples per class")

    dtype = np.float64 if tcfg.precision == "float64" else np.float32
    seeds = np.random.SeedSequence([tcfg.seed, 0x7EA])
    init_seed, shuffle_seed = seeds.spawn(2)
    model = Model(mcfg, seed=init_seed, dtype=dtype)
    if mcfg.fuse_biomarker:
        values = [s.biomarker for s in train_set]
        if any(v is None for v in values):
            raise TrainingError("fusion enabled but a training sample lacks a biomarker")
        arr = np.asarray(values, dtype=np.float64)
        model.set_biomarker_stats(arr.mean(), max(arr.std(), 1e-12))

    state = nn.AdamState()
    shuffle_rng = np.random.default_rng(shuffle_seed)
    round_size = tcfg.micro_batch * tcfg.accumulation_steps
    history = []
    best_val, best_epoch, best_state = -1.0, -1, model.params.state_dict()

    for epoch in range(tcfg.epochs):
        order = shuffle_rng.permutation(len(train_set))
        losses_epoch = []
        preds_epoch = []
        labels_epoch = []
        for start in range(0, order.size, round_size):
            round_idx = order[start : start + round_size]
            losses = []
            for i in round_idx:
                sample = train_set[i]
                logit, _ = model.forward(sample)
                loss = nn.bce_with_logits(logit, sample.label)
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, sample "
                        f"{sample.sample_id or i!r}"
                    )
                losses.append(loss)
                losses_epoch.append(float(loss.data))
                preds_epoch.append(1 if ad.sigmoid_value(logit) >= 0.5 else 0)
                labels_epoch.append(sample.label)
            grads = nn.accumulate_gradients(model.params, losses, len(losses))
            nn.adam_step(
                model.params, grads, state,
                lr=tcfg.lr, weight_decay=tcfg.weight_decay,
            )
        train_acc = float(np.mean(np.array(preds_epoch) == np.array(labels_epoch)))
        val_acc = (
            evaluate(val_set, model)[0].accuracy if val_set else float("nan")
        )
        history.append(
            {
                "epoch": epoch,
                "loss": float(np.mean(losses_epoch)),
                "train_acc": train_acc,
                "val_acc": val_acc,
            }
        )
        # Latest epoch achieving the best validation accuracy wins: on small
        # validation sets early flukes otherwise freeze an untrained model.
        if val_set and val_acc >= best_val:
            best_val, best_epoch = val_acc, epoch
            best_state = model.params.state_dict()

    if val_set:
        model.params.load_state_dict(best_state)
    else:
        best_epoch = tcfg.epochs - 1
    return TrainResult(model=model, history=history, best_epoch=best_epoch, split=split)


def evaluate(dataset, model: Model, threshold: float = 0.5):
    """Confusion metrics at the given sigmoid threshold.

    Returns (Metrics, per-sample probabilities).
    """
    if not dataset:
        raise ConfigError("cannot evaluate an empty dataset")
    probs = np.array([model.predict_proba(s) for s in dataset])
    labels = np.array([s.label for s in dataset])
    preds = (probs >= threshold).astype(int)
    return Metrics.from_predictions(labels, preds), probs


def biomarker_threshold(train_samples) -> float:
    """Midpoint of the class-conditional biomarker means on a training split."""
    values = {0: [], 1: []}
    for s in train_samples:
        if s.biomarker is None:
            raise ConfigError("sample without biomarker in baseline fit")
        values[s.label].append(float(s.biomarker))
    if not values[0] or not values[1]:
        raise ConfigError("baseline fit needs both classes")
    return 0.5 * (float(np.mean(values[0])) + float(np.mean(values[1])))


def evaluate_biomarker_only(dataset, threshold: float) -> Metrics:
    labels = [s.label for s in dataset]
    preds = [1 if float(s.biomarker) > threshold else 0 for s in dataset]
    return Metrics.from_predictions(labels, preds)


# Clinical decision rules (plasma pTau-217 ng/L cutpoints and the amyloid-PET
# Centiloid positivity rule).
PTAU_LOW_CUTOFF = 1.53
PTAU_HIGH_CUTOFF = 2.602
CENTILOID_POSITIVE = 20.0


def stratify_risk(biomarker: float) -> str:
    """Two-threshold risk band: low / medium / high."""
    if not np.isfinite(biomarker):
        raise ConfigError(f"biomarker must be finite, got {biomarker}")
    if biomarker < PTAU_LOW_CUTOFF:
        return "low"
    if biomarker > PTAU_HIGH_CUTOFF:
        return "high"
    return "medium"


def amyloid_label(centiloid: float) -> int:
    """1 iff the Centiloid value is strictly above the positivity cutoff."""
    if not np.isfinite(centiloid):
        raise ConfigError(f"centiloid must be finite, got {centiloid}")
    return int(centiloid > CENTILOID_POSITIVE)

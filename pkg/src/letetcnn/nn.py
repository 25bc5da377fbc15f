"""Network building blocks: pointwise MLP, Chebyshev spectral convolution,
radius-graph vector attention with relative positional encoding, pooling,
loss, and the Adam optimizer.

Attention is per-channel ("vector") by default: scores are d-vectors and the
softmax normalizes each channel independently over a token's incoming edges.
A scalar mode (per-edge softmax of the mean score) is kept behind a flag for
ablation. Weights initialize Glorot-uniform from a caller-supplied RNG;
biases start at zero.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParamSet:
    """Named parameter tensors, created in a deterministic order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, name, shape, rng, fan_in=None, fan_out=None, dtype=np.float64):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        if fan_in is None:
            t = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            t = Tensor(
                rng.uniform(-bound, bound, size=shape).astype(dtype),
                requires_grad=True,
            )
        self._params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state):
        missing = set(self._params) ^ set(state)
        if missing:
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for name, arr in state.items():
            p = self._params[name]
            arr = np.asarray(arr)
            if p.data.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}"
                )
            p.data = arr.copy()


def affine(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    out = ad.matmul(x, w)
    return ad.add(out, b) if b is not None else out


class PointwiseMlp:
    """Shared per-node projection of raw coordinates: affine + ReLU."""

    def __init__(self, params: ParamSet, prefix, d_in, d_out, rng, dtype=np.float64):
        self.w = params.create(f"{prefix}.w", (d_in, d_out), rng, d_in, d_out, dtype)
        self.b = params.create(f"{prefix}.b", (d_out,), rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(affine(x, self.w, self.b))


class LinearProjection:
    """Plain affine map (no nonlinearity); the coordinate projection of the
    transformer-only variant."""

    def __init__(self, params: ParamSet, prefix, d_in, d_out, rng, dtype=np.float64):
        self.w = params.create(f"{prefix}.w", (d_in, d_out), rng, d_in, d_out, dtype)
        self.b = params.create(f"{prefix}.b", (d_out,), rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return affine(x, self.w, self.b)


class ChebConv:
    """Spectral graph convolution via the Chebyshev recurrence.

    forward(x, L) = sum_m T_m(L) x theta_m with T_0 x = x, T_1 x = L x,
    T_m x = 2 L T_{m-1} x - T_{m-2} x. The polynomial matrices are never
    materialized; only sparse matvecs run.
    """

    def __init__(self, params: ParamSet, prefix, d_in, d_out, order, rng,
                 dtype=np.float64):
        if order < 0:
            raise ValueError("Chebyshev order must be >= 0")
        self.order = order
        self.theta = [
            params.create(f"{prefix}.theta{m}", (d_in, d_out), rng, d_in, d_out, dtype)
            for m in range(order + 1)
        ]

    def forward(self, x: Tensor, scaled_laplacian) -> Tensor:
        t_prev2 = x
        out = ad.matmul(t_prev2, self.theta[0])
        if self.order == 0:
            return out
        t_prev1 = ad.spmm(scaled_laplacian, x)
        out = ad.add(out, ad.matmul(t_prev1, self.theta[1]))
        for m in range(2, self.order + 1):
            t_m = ad.sub(ad.scale(ad.spmm(scaled_laplacian, t_prev1), 2.0), t_prev2)
            out = ad.add(out, ad.matmul(t_m, self.theta[m]))
            t_prev2, t_prev1 = t_prev1, t_m
        return out


class TwoLayerMlp:
    """affine -> ReLU -> affine; used for the positional and score networks."""

    def __init__(self, params: ParamSet, prefix, d_in, d_hidden, d_out, rng,
                 dtype=np.float64):
        self.w1 = params.create(f"{prefix}.w1", (d_in, d_hidden), rng, d_in, d_hidden, dtype)
        self.b1 = params.create(f"{prefix}.b1", (d_hidden,), rng, dtype=dtype)
        self.w2 = params.create(f"{prefix}.w2", (d_hidden, d_out), rng, d_hidden, d_out, dtype)
        self.b2 = params.create(f"{prefix}.b2", (d_out,), rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return affine(ad.relu(affine(x, self.w1, self.b1)), self.w2, self.b2)


class PointTransformer:
    """Sparse local attention over a radius graph with relative positions.

    Per edge (target i <- source j):
        e_ij = score_mlp(q_i - k_j) + pos_mlp(p_j - p_i)
        a_ij = softmax over j (per channel, or per edge in scalar mode)
        out_i = sum_j a_ij * (v_j + pos_mlp(p_j - p_i))
    followed by a residual connection. With all weights zero the layer is an
    exact identity.
    """

    def __init__(self, params: ParamSet, prefix, d, rng, scalar_attention=False,
                 positional_values=True, dtype=np.float64):
        self.d = d
        self.scalar_attention = scalar_attention
        self.positional_values = positional_values
        self.wq = params.create(f"{prefix}.wq", (d, d), rng, d, d, dtype)
        self.wk = params.create(f"{prefix}.wk", (d, d), rng, d, d, dtype)
        self.wv = params.create(f"{prefix}.wv", (d, d), rng, d, d, dtype)
        self.pos_mlp = TwoLayerMlp(params, f"{prefix}.pos", 3, d, d, rng, dtype)
        self.score_mlp = TwoLayerMlp(params, f"{prefix}.score", d, d, d, rng, dtype)

    def forward(self, tokens: Tensor, centers: np.ndarray, targets, sources) -> Tensor:
        n_tokens = tokens.data.shape[0]
        targets = np.asarray(targets, dtype=np.int64)
        sources = np.asarray(sources, dtype=np.int64)
        if np.bincount(targets, minlength=n_tokens).min() < 1:
            raise ValueError("every token needs at least one incoming edge")

        q = ad.matmul(tokens, self.wq)
        k = ad.matmul(tokens, self.wk)
        v = ad.matmul(tokens, self.wv)

        offsets = Tensor(centers[sources] - centers[targets])
        pos = self.pos_mlp.forward(offsets)

        scores = ad.add(
            self.score_mlp.forward(ad.sub(ad.gather_rows(q, targets),
                                          ad.gather_rows(k, sources))),
            pos,
        )
        if self.scalar_attention:
            ones = Tensor(np.ones((self.d, 1), dtype=scores.data.dtype))
            scalar = ad.scale(ad.matmul(scores, ones), 1.0 / self.d)
            attn = ad.segment_softmax(scalar, targets, n_tokens)
            attn = ad.matmul(attn, Tensor(np.ones((1, self.d), dtype=scores.data.dtype)))
        else:
            attn = ad.segment_softmax(scores, targets, n_tokens)

        values = ad.gather_rows(v, sources)
        if self.positional_values:
            values = ad.add(values, pos)
        gathered = ad.segment_sum(ad.mul(attn, values), targets, n_tokens)
        return ad.add(gathered, tokens)


def global_mean_pool(tokens: Tensor) -> Tensor:
    return ad.mean_rows(tokens)


def bce_with_logits(logit: Tensor, label) -> Tensor:
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    return ad.bce_with_logits(logit, float(label))


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(
    params: ParamSet,
    grads: dict,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One coupled-weight-decay Adam update, in place on the parameters."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        # asarray keeps 0-d parameters as arrays (numpy scalarizes 0-d math)
        p.data = np.asarray(p.data - lr * m_hat / (np.sqrt(v_hat) + eps))


def accumulate_gradients(params: ParamSet, losses, total_count: int | None = None):
    """Sum per-sample loss gradients and average over the sample count.

    Equivalent (to rounding) to backpropagating the mean loss of one large
    batch, regardless of how the losses were micro-batched.
    """
    if total_count is None:
        total_count = len(losses)
    if total_count < 1:
        raise ValueError("need at least one sample to accumulate")
    params.zero_grads()
    for loss in losses:
        loss.backward()
    inv = 1.0 / total_count
    return {
        name: (p.grad * inv if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

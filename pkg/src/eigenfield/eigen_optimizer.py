"""Gradient-based pseudo-eigenvector optimization.

The field X (h0 x w0 x C, stacked per image for batches) is driven to minimize

    mean_{A in set}  sum_c | u_c^T D^-1 A u_c  -  1 |   +   || X^T X - I ||_F

where u_c is channel c of the bilinearly resampled field g(X), scaled to unit
norm, and the penalty acts on the raw flattened X. The L1 term is applied to
the per-channel Rayleigh quotients only (the diagonal); off-diagonal structure
is governed by the orthogonality penalty. Gradients are analytic; the
resampler's adjoint is exact by construction (transpose of the sparse
interpolation operator).

Sign conventions: the L1 subgradient at exactly 0 is 0, and the Frobenius
penalty gradient at the orthonormal point is 0, so exact indicator optima are
stationary.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from eigenfield.graph_builder import (
    AffinityGraph,
    BatchSpec,
    GraphConfig,
    build_batch_graph,
)
from eigenfield.tensor_store import EigenField, FeatureBundle


class ZeroChannelError(ValueError):
    """A resampled channel has zero norm; its Rayleigh quotient is undefined."""


class DivergenceError(RuntimeError):
    """The optimization loss became non-finite."""


@dataclass
class LossTerms:
    rayleigh_l1: float
    ortho_penalty: float

    @property
    def total(self) -> float:
        return self.rayleigh_l1 + self.ortho_penalty


# ---------------------------------------------------------------------------
# Bilinear resampling (align-corners) and its exact adjoint
# ---------------------------------------------------------------------------

_RESAMPLE_CACHE: dict[tuple[tuple[int, int], tuple[int, int]], sp.csr_matrix] = {}


def _axis_coords(src: int, dst: int) -> np.ndarray:
    if dst < 1:
        raise ValueError(f"target dimension must be >= 1, got {dst}")
    if dst == 1 or src == 1:
        return np.zeros(dst)
    return np.arange(dst) * (src - 1) / (dst - 1)


def resample_matrix(
    src_shape: tuple[int, int], dst_shape: tuple[int, int]
) -> sp.csr_matrix:
    """Sparse (h*w) x (h0*w0) align-corners bilinear interpolation operator.

    Corner pixels map to corner pixels; when shapes match this is the
    identity. Cached per shape pair.
    """
    key = (tuple(src_shape), tuple(dst_shape))
    if key in _RESAMPLE_CACHE:
        return _RESAMPLE_CACHE[key]
    h0, w0 = src_shape
    h, w = dst_shape
    if h0 < 1 or w0 < 1:
        raise ValueError(f"source shape must be positive, got {src_shape}")
    ys = _axis_coords(h0, h)
    xs = _axis_coords(w0, w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h0 - 1)
    x1 = np.minimum(x0 + 1, w0 - 1)
    fy = ys - y0
    fx = xs - x0

    rows, cols, vals = [], [], []
    out_idx = np.arange(h * w).reshape(h, w)
    for (yy, wy) in ((y0, 1.0 - fy), (y1, fy)):
        for (xx, wx) in ((x0, 1.0 - fx), (x1, fx)):
            wgt = wy[:, None] * wx[None, :]
            rows.append(out_idx.ravel())
            cols.append((yy[:, None] * w0 + xx[None, :]).ravel())
            vals.append(wgt.ravel())
    G = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(h * w, h0 * w0),
    ).tocsr()
    G.sum_duplicates()
    _RESAMPLE_CACHE[key] = G
    return G


def resample_bilinear(field: EigenField, target: tuple[int, int]) -> np.ndarray:
    """g(X): (n_images * h * w) x C matrix in graph node order.

    Each image block of a stacked field is resampled independently and the
    blocks are concatenated in image order, matching batch-graph node layout.
    """
    G = resample_matrix(field.grid_shape, target)
    h0, w0 = field.grid_shape
    c = field.channels
    blocks = [
        G @ field.values[b * h0 : (b + 1) * h0].reshape(h0 * w0, c)
        for b in range(field.n_images)
    ]
    return np.concatenate(blocks, axis=0)


def resample_bilinear_vjp(
    field: EigenField, target: tuple[int, int], upstream: np.ndarray
) -> np.ndarray:
    """Exact adjoint of ``resample_bilinear``: G^T applied per image block."""
    G = resample_matrix(field.grid_shape, target)
    h0, w0 = field.grid_shape
    c = field.channels
    n_out = target[0] * target[1]
    if upstream.shape != (field.n_images * n_out, c):
        raise ValueError(
            f"upstream shaped {upstream.shape}, expected "
            f"({field.n_images * n_out}, {c})"
        )
    blocks = [
        (G.T @ upstream[b * n_out : (b + 1) * n_out]).reshape(h0, w0, c)
        for b in range(field.n_images)
    ]
    return np.concatenate(blocks, axis=0)


def resample_array(values: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Convenience: resample one (h, w, C) array to (target_h, target_w, C)."""
    h, w, c = values.shape
    G = resample_matrix((h, w), target)
    out = G @ values.reshape(h * w, c)
    return out.reshape(target[0], target[1], c)


# ---------------------------------------------------------------------------
# Loss and analytic gradient
# ---------------------------------------------------------------------------


def _graph_terms(field: EigenField, graph: AffinityGraph, want_grad: bool):
    """L1 Rayleigh term and (optionally) its gradient for one graph."""
    if graph.n_images != field.n_images:
        raise ValueError(
            f"graph spans {graph.n_images} images but field stacks {field.n_images}"
        )
    shape = graph.grid_shapes[0]
    for s in graph.grid_shapes[1:]:
        if s != shape:
            raise ValueError("mixed per-image grid shapes in one graph")
    Y = resample_bilinear(field, shape)
    A = graph.matrix
    d = graph.degrees
    total = 0.0
    up = np.zeros_like(Y) if want_grad else None
    for c in range(Y.shape[1]):
        y = Y[:, c]
        s = float(y @ y)
        if s == 0.0:
            raise ZeroChannelError(
                f"channel {c} resamples to zero norm at grid {shape}"
            )
        Ay = A @ y
        Py = Ay / d
        r = float(y @ Py) / s
        total += abs(r - 1.0)
        if want_grad:
            sign = float(np.sign(r - 1.0))
            if sign != 0.0:
                PTy = (A.T @ (y / d)) if graph.is_sparse else A.T @ (y / d)
                up[:, c] = sign * ((Py + PTy) - 2.0 * r * y) / s
    grad = resample_bilinear_vjp(field, shape, up) if want_grad else None
    return total, grad


def _penalty_terms(field: EigenField, want_grad: bool):
    Z = field.flat()
    M = Z.T @ Z - np.eye(field.channels)
    p = float(np.linalg.norm(M))
    if not want_grad:
        return p, None
    # ||.||_F is a cone at M = 0: its gradient stays O(1) arbitrarily close to
    # the orthonormal point, so roundoff-level M must take the 0 subgradient
    # or exact optima would not be stationary.
    if p < 1e-12:
        return p, np.zeros_like(field.values)
    g = (2.0 / p) * (Z @ M)
    return p, g.reshape(field.values.shape)


def loss_eval(field: EigenField, graphs: Sequence[AffinityGraph]) -> LossTerms:
    """Mean per-graph L1 Rayleigh deviation plus the orthogonality penalty."""
    if not graphs:
        raise ValueError("empty affinity set")
    rayleigh = float(np.mean([_graph_terms(field, g, False)[0] for g in graphs]))
    penalty, _ = _penalty_terms(field, False)
    return LossTerms(rayleigh_l1=rayleigh, ortho_penalty=penalty)


def loss_grad(field: EigenField, graphs: Sequence[AffinityGraph]) -> np.ndarray:
    """Analytic gradient of the total loss w.r.t. the field values."""
    return _loss_and_grad(field, graphs)[1]


def _loss_and_grad(
    field: EigenField, graphs: Sequence[AffinityGraph]
) -> tuple[LossTerms, np.ndarray]:
    if not graphs:
        raise ValueError("empty affinity set")
    rayleigh = 0.0
    grad = np.zeros_like(field.values)
    for g in graphs:
        t, gr = _graph_terms(field, g, True)
        rayleigh += t
        grad += gr
    rayleigh /= len(graphs)
    grad /= len(graphs)
    penalty, pgrad = _penalty_terms(field, True)
    grad += pgrad
    return LossTerms(rayleigh_l1=rayleigh, ortho_penalty=penalty), grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Plain Adam with bias correction; moments shaped like the field."""

    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    accum_steps: int = 1

    @classmethod
    def fresh(cls, shape: tuple, lr: float, accum_steps: int = 1) -> "OptimizerState":
        return cls(
            lr=lr,
            m=np.zeros(shape),
            v=np.zeros(shape),
            accum_steps=accum_steps,
        )


def adam_step(
    state: OptimizerState, field: EigenField, gradient: np.ndarray
) -> tuple[EigenField, OptimizerState]:
    """One Adam update; returns the updated field and state."""
    if gradient.shape != field.values.shape:
        raise ValueError(
            f"gradient shaped {gradient.shape}, field shaped {field.values.shape}"
        )
    if not np.isfinite(gradient).all():
        raise ValueError("non-finite gradient entries")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * gradient
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * gradient**2
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    new_values = field.values - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    out = EigenField(
        values=new_values,
        grid_shape=field.grid_shape,
        n_images=field.n_images,
        meta=field.meta,
    )
    return out, state


# ---------------------------------------------------------------------------
# Graph buffer (attention-set caching for sampled providers)
# ---------------------------------------------------------------------------


@dataclass
class GraphBuffer:
    """FIFO cache of affinity sets with probabilistic refresh.

    Each draw either samples a fresh set from the provider (probability
    ``new_sample_prob``, evicting the oldest entry once full) or reuses a
    uniformly chosen cached set.
    """

    capacity: int = 5
    new_sample_prob: float = 0.25
    _entries: deque = dc_field(default_factory=deque, repr=False)

    def __len__(self) -> int:
        return len(self._entries)

    def draw(
        self,
        provider: Callable[[np.random.Generator], list[AffinityGraph]],
        rng: np.random.Generator,
    ) -> list[AffinityGraph]:
        refresh = len(self._entries) == 0 or rng.random() < self.new_sample_prob
        if refresh:
            graphs = provider(rng)
            if len(self._entries) >= self.capacity:
                self._entries.popleft()
            self._entries.append(graphs)
            return graphs
        idx = int(rng.integers(len(self._entries)))
        return self._entries[idx]


# ---------------------------------------------------------------------------
# Per-image optimization
# ---------------------------------------------------------------------------


@dataclass
class PerImageConfig:
    channels: int = 10
    iters: int = 2000
    lr: float = 1e-3
    seed: int = 0
    buffer_size: int = 5
    new_sample_prob: float = 0.25
    accum_steps: int | None = None  # None: 1 for fixed sets, 20 for providers
    init_scale: float | None = None  # None: 1/sqrt(h0*w0)
    lr_schedule: str = "cosine"  # or "constant"


def _scheduled_lr(base: float, schedule: str, it: int, total: int) -> float:
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return base * 0.5 * (1.0 + np.cos(np.pi * it / max(total, 1)))
    raise ValueError(f"unknown lr schedule {schedule!r}")


GraphsProvider = Callable[[np.random.Generator], list[AffinityGraph]]


def _finest_shape(graphs: Sequence[AffinityGraph]) -> tuple[int, int]:
    return max((g.grid_shapes[0] for g in graphs), key=lambda s: s[0] * s[1])


def init_field(
    shape: tuple[int, int],
    channels: int,
    rng: np.random.Generator,
    n_images: int = 1,
    scale: float | None = None,
) -> EigenField:
    """Normal init scaled so initial channel norms sit near 1."""
    h0, w0 = shape
    if scale is None:
        scale = 1.0 / np.sqrt(h0 * w0)
    values = rng.standard_normal((n_images * h0, w0, channels)) * scale
    return EigenField(values=values, grid_shape=shape, n_images=n_images)


def optimize_per_image(
    graphs_provider: Sequence[AffinityGraph] | GraphsProvider,
    config: PerImageConfig | None = None,
) -> EigenField:
    """Optimize one image's field against its affinity set.

    ``graphs_provider`` is either a fixed list of graphs (static backbones) or
    a callable drawing a fresh set per call (diffusion-style timestep
    sampling); sampled sets go through the graph buffer.
    """
    config = config or PerImageConfig()
    rng = np.random.default_rng(config.seed)
    fixed = not callable(graphs_provider)
    buffer = GraphBuffer(
        capacity=config.buffer_size, new_sample_prob=config.new_sample_prob
    )
    if fixed:
        first = list(graphs_provider)
        if not first:
            raise ValueError("provider yielded no affinity graphs")
        draw = lambda: first  # noqa: E731
        accum = config.accum_steps if config.accum_steps is not None else 1
    else:
        draw = lambda: buffer.draw(graphs_provider, rng)  # noqa: E731
        first = draw()
        if not first:
            raise ValueError("provider yielded no affinity graphs")
        accum = config.accum_steps if config.accum_steps is not None else 20

    shape = _finest_shape(first)
    field = init_field(shape, config.channels, rng, scale=config.init_scale)
    state = OptimizerState.fresh(field.values.shape, config.lr, accum)
    history: list[float] = []

    for it in range(config.iters):
        grad = np.zeros_like(field.values)
        loss_sum = 0.0
        for _ in range(accum):
            graphs = first if fixed else draw()
            terms, g = _loss_and_grad(field, graphs)
            if not np.isfinite(terms.total):
                raise DivergenceError(
                    f"non-finite loss at iteration {it}: "
                    f"rayleigh={terms.rayleigh_l1}, penalty={terms.ortho_penalty}"
                )
            grad += g
            loss_sum += terms.total
        grad /= accum
        state.lr = _scheduled_lr(config.lr, config.lr_schedule, it, config.iters)
        field, state = adam_step(state, field, grad)
        history.append(loss_sum / accum)

    field.meta.update(
        {
            "iterations": config.iters,
            "seed": config.seed,
            "channels": config.channels,
            "loss_history": history,
            "final_loss": history[-1] if history else None,
        }
    )
    return field


# ---------------------------------------------------------------------------
# Dataset optimization
# ---------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    channels: int = 50
    c_intra: int = 10
    c_inter: int = 10
    threshold: float = 0.0
    batch: int = 160
    lr: float = 1e-2
    iters: int = 2100
    steps_per_batch: int = 1
    source: str = "vv"  # or "qk"
    seed: int = 0
    layers: list[int] | None = None  # None: all shared layers within max_resolution
    max_resolution: tuple[int, int] = (32, 32)
    timestep: int = 0
    init_scale: float | None = None
    lr_schedule: str = "cosine"  # or "constant"


def _resolve_layers(bundles: Sequence[FeatureBundle], cfg: DatasetConfig) -> list[int]:
    kind = "query" if cfg.source == "qk" else "value"
    shared = set(bundles[0].layers(kind))
    for b in bundles[1:]:
        shared &= set(b.layers(kind))
    if cfg.layers is not None:
        missing = [l for l in cfg.layers if l not in shared]
        if missing:
            raise ValueError(f"layers {missing} not present in every bundle")
        layers = list(cfg.layers)
    else:
        max_h, max_w = cfg.max_resolution
        layers = [
            l
            for l in sorted(shared)
            if bundles[0].grid_shape(l, kind)[0] <= max_h
            and bundles[0].grid_shape(l, kind)[1] <= max_w
        ]
    if not layers:
        raise ValueError("no usable layers at or below the resolution cap")
    return layers


def optimize_dataset(
    bundles: Sequence[FeatureBundle],
    config: DatasetConfig | None = None,
) -> dict[str, EigenField]:
    """One persistent field per image, optimized over mini-batch graphs.

    Batches cycle through seeded permutations of the dataset, so every image
    is visited within ceil(N / batch) iterations. Per-image Adam moments
    persist across batches.
    """
    config = config or DatasetConfig()
    bundles = list(bundles)
    if not bundles:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    kind = "query" if config.source == "qk" else "value"
    layers = _resolve_layers(bundles, config)
    gcfg = GraphConfig(
        c_intra=config.c_intra,
        c_inter=config.c_inter,
        threshold=config.threshold,
        include_heads="concatenated",
        max_resolution=config.max_resolution,
    )

    shape = max(
        (bundles[0].grid_shape(l, kind) for l in layers), key=lambda s: s[0] * s[1]
    )
    batch = config.batch
    if batch > len(bundles):
        warnings.warn(
            f"batch {batch} larger than dataset ({len(bundles)}); clamping",
            stacklevel=2,
        )
        batch = len(bundles)

    fields = {
        b.image_id: init_field(
            shape, config.channels, rng, scale=config.init_scale
        )
        for b in bundles
    }
    states = {
        b.image_id: OptimizerState.fresh(fields[b.image_id].values.shape, config.lr)
        for b in bundles
    }

    order: list[int] = []
    h0, w0 = shape
    graph_cache: dict[tuple[int, ...], list[AffinityGraph]] = {}
    for it in range(config.iters):
        if not order:
            order = list(rng.permutation(len(bundles)))
        take = [order.pop(0) for _ in range(min(batch, len(order)))]
        take.sort()  # canonical in-batch order: features are static, so the
        # same membership always builds the same graphs (enables caching)
        chunk = [bundles[i] for i in take]
        key = tuple(take)
        if key in graph_cache:
            graphs = graph_cache[key]
        else:
            spec = BatchSpec.from_bundles(chunk, layers, kind)
            graphs = [
                build_batch_graph(chunk, l, config.source, gcfg, spec, config.timestep)
                for l in layers
            ]
            if len(graph_cache) < 8:
                graph_cache[key] = graphs
        ids = [b.image_id for b in chunk]
        lr_t = _scheduled_lr(config.lr, config.lr_schedule, it, config.iters)
        for _ in range(config.steps_per_batch):
            stacked = EigenField(
                values=np.concatenate([fields[i].values for i in ids], axis=0),
                grid_shape=shape,
                n_images=len(ids),
            )
            terms, grad = _loss_and_grad(stacked, graphs)
            if not np.isfinite(terms.total):
                raise DivergenceError(f"non-finite loss at iteration {it}")
            for j, image_id in enumerate(ids):
                g = grad[j * h0 : (j + 1) * h0]
                states[image_id].lr = lr_t
                fields[image_id], states[image_id] = adam_step(
                    states[image_id], fields[image_id], g
                )

    for b in bundles:
        fields[b.image_id].meta.update(
            {
                "graph": config.source,
                "iterations": config.iters,
                "seed": config.seed,
                "channels": config.channels,
                "layers": layers,
            }
        )
    return fields


# ---------------------------------------------------------------------------
# Orthogonalization
# ---------------------------------------------------------------------------


@dataclass
class OrthoEigenField(EigenField):
    """Rotated field X U with channels ordered by descending Gram eigenvalue."""

    eigenvalues: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))


def _gram_rotation(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gram = Z.T @ Z
    vals, vecs = np.linalg.eigh(gram)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    # deterministic sign: largest-magnitude component of each column positive
    for j in range(vecs.shape[1]):
        k = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[k, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return vals, vecs


def orthogonalize(field: EigenField) -> OrthoEigenField:
    """Rotate channels into the eigenbasis of the C x C Gram matrix X^T X."""
    if not np.isfinite(field.values).all():
        raise ValueError("field contains non-finite values")
    Z = field.flat()
    vals, U = _gram_rotation(Z)
    rotated = (Z @ U).reshape(field.values.shape)
    out = OrthoEigenField(
        values=rotated,
        grid_shape=field.grid_shape,
        n_images=field.n_images,
        meta={**field.meta, "eigenvalues": vals.tolist()},
        eigenvalues=vals,
    )
    _check_ortho(out)
    return out


def orthogonalize_joint(
    fields: Sequence[EigenField],
) -> list[OrthoEigenField]:
    """One shared rotation from the Gram of all fields stacked together.

    Keeps channels comparable across a dataset: per-image orthogonalization
    would permute/flip channels independently per image.
    """
    if not fields:
        raise ValueError("no fields to orthogonalize")
    Z = np.concatenate([f.flat() for f in fields], axis=0)
    vals, U = _gram_rotation(Z)
    outs = []
    for f in fields:
        rotated = (f.flat() @ U).reshape(f.values.shape)
        outs.append(
            OrthoEigenField(
                values=rotated,
                grid_shape=f.grid_shape,
                n_images=f.n_images,
                meta={**f.meta, "eigenvalues": vals.tolist(), "joint": True},
                eigenvalues=vals,
            )
        )
    return outs


def _check_ortho(field: OrthoEigenField) -> None:
    vals = field.eigenvalues
    if np.any(np.diff(vals) > 1e-9 * max(1.0, abs(float(vals[0])))):
        raise RuntimeError("orthogonalization produced increasing eigenvalues")
    gram = field.flat().T @ field.flat()
    off = gram - np.diag(np.diag(gram))
    scale = max(float(np.abs(np.diag(gram)).max()), 1e-30)
    if np.abs(off).max() > 1e-4 * scale:
        raise RuntimeError(
            "orthogonalized channels are not mutually orthogonal within 1e-4"
        )

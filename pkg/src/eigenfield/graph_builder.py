"""Affinity graph construction.

Two families of graphs feed the optimizer:

* per-image pre-softmax attention graphs, A[i, j] = exp(q_i . k_j / sqrt(d)),
  one per (layer, head, timestep) or per (layer, timestep) with heads
  concatenated;
* dataset-level sparse graphs over a mini-batch of images, built from clamped
  dot products of unit-normalized query/key (qk) or value/value (vv) vectors,
  then sparsified to the top c_intra same-image and top c_inter cross-image
  connections per row.

Weights are nonnegative by construction and degrees are recomputed from the
entries actually retained, so D always matches the graph used in the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from eigenfield.tensor_store import MERGED_HEAD, FeatureBundle


class GraphError(ValueError):
    """Invalid graph construction input or result."""


class IsolatedNodeError(GraphError):
    """A node lost all of its edges during sparsification."""


class ZeroDegreeError(GraphError):
    """A row of the affinity matrix sums to zero."""


@dataclass
class AffinityGraph:
    """One nonnegative weighted graph over grid nodes, dense or sparse CSR.

    ``grid_shapes[b]`` and ``image_offsets[b]`` describe the node block of
    image b; node indices within a block follow row-major raster order over
    the grid. Single-image graphs have one block at offset 0.
    """

    matrix: np.ndarray | sp.csr_matrix
    grid_shapes: list[tuple[int, int]]
    image_offsets: np.ndarray
    degrees: np.ndarray
    tag: dict = dc_field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_images(self) -> int:
        return len(self.grid_shapes)

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.matrix)

    def block_of(self, node: int) -> int:
        """Index of the image block containing ``node``."""
        return int(np.searchsorted(self.image_offsets, node, side="right") - 1)

    def validate(self) -> None:
        n = self.n_nodes
        if self.matrix.shape != (n, n):
            raise GraphError(f"matrix must be square, got {self.matrix.shape}")
        sizes = [h * w for h, w in self.grid_shapes]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        if not np.array_equal(offsets[:-1], self.image_offsets) or offsets[-1] != n:
            raise GraphError("image offsets inconsistent with grid shapes")
        data = self.matrix.data if self.is_sparse else self.matrix
        if data.size and data.min() < 0:
            raise GraphError("affinity weights must be nonnegative")
        rows = _row_sums(self.matrix)
        if not np.allclose(rows, self.degrees, rtol=1e-10, atol=1e-12):
            raise GraphError("stored degrees do not match row sums")
        if self.degrees.size and self.degrees.min() <= 0:
            bad = int(np.argmin(self.degrees))
            raise ZeroDegreeError(f"node {bad} has zero degree")


@dataclass
class GraphConfig:
    """Sparsification and assembly knobs for dataset graphs."""

    c_intra: int = 10
    c_inter: int = 10
    threshold: float = 0.0
    include_heads: str = "concatenated"  # or "independent"
    max_resolution: tuple[int, int] = (32, 32)

    def __post_init__(self) -> None:
        if self.c_intra < 1:
            raise ValueError("c_intra must be >= 1")
        if self.c_inter < 0:
            raise ValueError("c_inter must be >= 0")
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.include_heads not in ("independent", "concatenated"):
            raise ValueError(f"unknown head mode {self.include_heads!r}")


@dataclass
class BatchSpec:
    """Ordered mini-batch membership and per-layer grid shapes."""

    image_ids: list[str]
    layer_shapes: dict[int, tuple[int, int]]

    def __post_init__(self) -> None:
        if len(self.image_ids) < 1:
            raise ValueError("batch must contain at least one image")

    @property
    def batch_size(self) -> int:
        return len(self.image_ids)

    @classmethod
    def from_bundles(
        cls, bundles: list[FeatureBundle], layers: list[int], kind: str = "query"
    ) -> "BatchSpec":
        if not bundles:
            raise GraphError("empty batch")
        shapes: dict[int, tuple[int, int]] = {}
        for layer in layers:
            shape = bundles[0].grid_shape(layer, kind)
            for b in bundles[1:]:
                if b.grid_shape(layer, kind) != shape:
                    raise GraphError(
                        f"layer {layer}: grid shape mismatch between "
                        f"{bundles[0].image_id!r} and {b.image_id!r}"
                    )
            shapes[layer] = shape
        return cls(image_ids=[b.image_id for b in bundles], layer_shapes=shapes)


def _row_sums(matrix) -> np.ndarray:
    if sp.issparse(matrix):
        return np.asarray(matrix.sum(axis=1)).ravel()
    return matrix.sum(axis=1)


def _fresh_graph(matrix, grid_shapes, tag=None) -> AffinityGraph:
    sizes = [h * w for h, w in grid_shapes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])[:-1].astype(np.int64)
    return AffinityGraph(
        matrix=matrix,
        grid_shapes=list(grid_shapes),
        image_offsets=offsets,
        degrees=_row_sums(matrix),
        tag=dict(tag or {}),
    )


# ---------------------------------------------------------------------------
# Per-image attention graphs
# ---------------------------------------------------------------------------


def build_qk_affinity(
    Q: np.ndarray,
    K: np.ndarray,
    d_l: int,
    grid_shape: tuple[int, int] | None = None,
    tag: dict | None = None,
) -> AffinityGraph:
    """Dense pre-softmax attention affinity A[i, j] = exp(q_i . k_j / sqrt(d_l))."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.shape != K.shape:
        raise GraphError(f"Q shape {Q.shape} != K shape {K.shape}")
    if Q.ndim != 2:
        raise GraphError("Q and K must be 2-D (tokens x dim)")
    if d_l <= 0:
        raise GraphError(f"embedding dim must be positive, got {d_l}")
    if not (np.isfinite(Q).all() and np.isfinite(K).all()):
        raise GraphError("non-finite entries in Q or K")
    logits = (Q @ K.T) / np.sqrt(float(d_l))
    A = np.exp(logits)
    if not np.isfinite(A).all():
        raise GraphError("attention affinity overflowed; rescale the features")
    n = A.shape[0]
    if grid_shape is None:
        grid_shape = (n, 1)
    if grid_shape[0] * grid_shape[1] != n:
        raise GraphError(f"grid shape {grid_shape} does not cover {n} tokens")
    return _fresh_graph(A, [grid_shape], tag)


def row_normalize(graph: AffinityGraph) -> np.ndarray | sp.csr_matrix:
    """The random-walk operator D^-1 A; each row sums to 1.

    For a pre-softmax attention graph this equals the row-wise softmax of
    Q K^T / sqrt(d).
    """
    if graph.degrees.min() <= 0:
        bad = int(np.argmin(graph.degrees))
        raise ZeroDegreeError(f"node {bad} has zero degree; cannot normalize")
    if graph.is_sparse:
        inv = sp.diags(1.0 / graph.degrees)
        return (inv @ graph.matrix).tocsr()
    return graph.matrix / graph.degrees[:, None]


def assemble_per_image_set(
    bundle: FeatureBundle, mode: str = "independent_heads"
) -> list[AffinityGraph]:
    """All pre-softmax attention graphs of one image.

    ``independent_heads``: one graph per (layer, head, timestep) query/key
    pair. ``concatenated``: heads of a layer are concatenated into one vector
    per token, one graph per (layer, timestep).
    """
    if mode not in ("independent_heads", "concatenated"):
        raise ValueError(f"unknown head mode {mode!r}")
    pairs = list(bundle.query_key_pairs())
    if not pairs:
        raise GraphError(f"bundle {bundle.image_id!r} has no query/key pairs")

    graphs: list[AffinityGraph] = []
    if mode == "independent_heads":
        for q_rec, k_rec in pairs:
            h, w, d = q_rec.shape
            Q = bundle.get("query", q_rec.layer, q_rec.head, q_rec.timestep)
            K = bundle.get("key", k_rec.layer, k_rec.head, k_rec.timestep)
            graphs.append(
                build_qk_affinity(
                    Q.reshape(h * w, d),
                    K.reshape(h * w, d),
                    d_l=d,
                    grid_shape=(h, w),
                    tag={
                        "layer": q_rec.layer,
                        "head": q_rec.head,
                        "timestep": q_rec.timestep,
                        "source": "qk",
                    },
                )
            )
        return graphs

    by_group: dict[tuple[int, int], list[tuple]] = {}
    for q_rec, k_rec in pairs:
        by_group.setdefault((q_rec.layer, q_rec.timestep), []).append((q_rec, k_rec))
    for (layer, timestep), group in sorted(by_group.items()):
        group.sort(key=lambda qk: qk[0].head)
        h, w, _ = group[0][0].shape
        Q = np.concatenate(
            [
                bundle.get("query", layer, q.head, timestep).reshape(h * w, -1)
                for q, _ in group
            ],
            axis=1,
        )
        K = np.concatenate(
            [
                bundle.get("key", layer, k.head, timestep).reshape(h * w, -1)
                for _, k in group
            ],
            axis=1,
        )
        graphs.append(
            build_qk_affinity(
                Q,
                K,
                d_l=Q.shape[1],
                grid_shape=(h, w),
                tag={
                    "layer": layer,
                    "head": MERGED_HEAD,
                    "timestep": timestep,
                    "source": "qk",
                },
            )
        )
    return graphs


# ---------------------------------------------------------------------------
# Dataset graphs
# ---------------------------------------------------------------------------


def _unit_rows(vectors: np.ndarray, image_id: str) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    bad = np.where(norms == 0)[0]
    if bad.size:
        raise GraphError(
            f"image {image_id!r}: node {int(bad[0])} has a zero feature vector; "
            "cannot normalize to unit norm"
        )
    return vectors / norms[:, None]


def _concat_heads(
    bundle: FeatureBundle, kind: str, layer: int, timestep: int
) -> np.ndarray:
    heads = bundle.heads(layer, kind)
    if not heads:
        raise GraphError(
            f"bundle {bundle.image_id!r} has no {kind!r} records at layer {layer}"
        )
    parts = [bundle.get(kind, layer, head, timestep) for head in heads]
    h, w, _ = parts[0].shape
    return np.concatenate([p.reshape(h * w, -1) for p in parts], axis=1)


def build_batch_graph(
    bundles: list[FeatureBundle],
    layer: int,
    source: str,
    cfg: GraphConfig,
    spec: BatchSpec,
    timestep: int = 0,
) -> AffinityGraph:
    """Sparse cross-image graph for one layer over a mini-batch.

    Rows are clamped dot products between unit-normalized vectors (queries x
    keys for ``qk``, values x values for ``vv``), head-concatenated, then
    sparsified to the per-row top c_intra / c_inter entries.
    """
    if source not in ("qk", "vv"):
        raise ValueError(f"unknown graph source {source!r}")
    if not bundles:
        raise GraphError("empty batch")
    if cfg.include_heads != "concatenated":
        raise GraphError("batch graphs require concatenated heads")
    shape = spec.layer_shapes[layer]
    max_h, max_w = cfg.max_resolution
    if shape[0] > max_h or shape[1] > max_w:
        raise GraphError(
            f"layer {layer} resolution {shape} exceeds cap {cfg.max_resolution}"
        )

    row_kind = "query" if source == "qk" else "value"
    col_kind = "key" if source == "qk" else "value"
    rows = [
        _unit_rows(_concat_heads(b, row_kind, layer, timestep), b.image_id)
        for b in bundles
    ]
    cols = (
        rows
        if source == "vv"
        else [
            _unit_rows(_concat_heads(b, col_kind, layer, timestep), b.image_id)
            for b in bundles
        ]
    )
    R = np.concatenate(rows, axis=0)
    Cm = np.concatenate(cols, axis=0)
    A = np.clip(R @ Cm.T, 0.0, None)
    grid_shapes = [shape] * len(bundles)
    dense = _fresh_graph(
        A, grid_shapes, tag={"layer": layer, "timestep": timestep, "source": source}
    )
    return sparsify_topc(dense, cfg)


def sparsify_topc(graph: AffinityGraph, cfg: GraphConfig) -> AffinityGraph:
    """Keep the top c_intra same-image and top c_inter cross-image entries per row.

    Entries strictly below ``cfg.threshold`` are dropped; zero entries are
    never retained (a zero weight is no edge). Degrees are recomputed from the
    surviving entries. Idempotent for a fixed config.
    """
    n = graph.n_nodes
    offsets = np.concatenate(
        [graph.image_offsets, [n]]
    )  # block b spans [offsets[b], offsets[b+1])
    dense = graph.matrix.toarray() if graph.is_sparse else np.asarray(graph.matrix)

    data: list[np.ndarray] = []
    indices: list[np.ndarray] = []
    indptr = np.zeros(n + 1, dtype=np.int64)
    block_ids = np.repeat(
        np.arange(graph.n_images), [h * w for h, w in graph.grid_shapes]
    )

    for i in range(n):
        row = dense[i]
        own = block_ids[i]
        keep_cols: list[np.ndarray] = []
        for scope, budget in (("intra", cfg.c_intra), ("inter", cfg.c_inter)):
            if scope == "intra":
                mask = block_ids == own
            else:
                mask = block_ids != own
            if budget == 0 or not mask.any():
                continue
            cand = np.where(mask & (row > 0) & (row >= cfg.threshold))[0]
            if cand.size == 0:
                continue
            if cand.size > budget:
                # stable top-k: sort by (-value, column) so ties break low-col
                order = np.lexsort((cand, -row[cand]))[:budget]
                cand = cand[order]
            keep_cols.append(cand)
        if not keep_cols:
            raise IsolatedNodeError(
                f"node {i} (image block {own}) lost all edges during sparsification"
            )
        cols = np.sort(np.concatenate(keep_cols))
        indices.append(cols)
        data.append(row[cols])
        indptr[i + 1] = indptr[i] + cols.size

    matrix = sp.csr_matrix(
        (np.concatenate(data), np.concatenate(indices), indptr), shape=(n, n)
    )
    out = _fresh_graph(matrix, graph.grid_shapes, graph.tag)
    if out.degrees.min() <= 0:
        bad = int(np.argmin(out.degrees))
        raise IsolatedNodeError(f"node {bad} has zero degree after sparsification")
    return out

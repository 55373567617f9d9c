"""Affinity construction: attention graphs, normalization, sparsification."""

import numpy as np
import pytest

from eigenfield.graph_builder import (
    BatchSpec,
    GraphConfig,
    GraphError,
    IsolatedNodeError,
    ZeroDegreeError,
    _fresh_graph,
    assemble_per_image_set,
    build_batch_graph,
    build_qk_affinity,
    row_normalize,
    sparsify_topc,
)
from test_tensor_store import _manifest_with

from eigenfield.tensor_store import load_bundle


# ---------------------------------------------------------------------------
# build_qk_affinity
# ---------------------------------------------------------------------------


def test_qk_zero_features_give_all_ones():
    Q = np.zeros((2, 3))
    g = build_qk_affinity(Q, Q, d_l=3)
    np.testing.assert_allclose(g.matrix, np.ones((2, 2)))


def test_qk_identity_features_match_closed_form():
    # A = exp(I_2 / sqrt(2)): diagonal e^{1/sqrt 2} = 2.028115..., off-diag 1
    I = np.eye(2)
    g = build_qk_affinity(I, I, d_l=2)
    diag = np.exp(1.0 / np.sqrt(2.0))
    np.testing.assert_allclose(g.matrix, [[diag, 1.0], [1.0, diag]], rtol=1e-12)
    assert abs(diag - 2.02812) < 1e-5


def test_qk_entries_strictly_positive():
    rng = np.random.default_rng(0)
    Q, K = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    g = build_qk_affinity(Q, K, d_l=4)
    assert (g.matrix > 0).all()
    np.testing.assert_allclose(g.degrees, g.matrix.sum(axis=1))


def test_qk_shape_mismatch():
    with pytest.raises(GraphError):
        build_qk_affinity(np.zeros((2, 3)), np.zeros((3, 3)), d_l=3)


def test_qk_nonfinite_inputs():
    Q = np.array([[np.nan, 0.0]])
    with pytest.raises(GraphError):
        build_qk_affinity(Q, Q, d_l=2)


# ---------------------------------------------------------------------------
# row_normalize
# ---------------------------------------------------------------------------


def test_row_normalize_hand_example():
    g = _fresh_graph(np.array([[2.0, 2.0], [1.0, 3.0]]), [(2, 1)])
    P = row_normalize(g)
    np.testing.assert_allclose(P, [[0.5, 0.5], [0.25, 0.75]])


def test_row_normalize_ones_block():
    g = _fresh_graph(np.ones((2, 2)), [(2, 1)])
    np.testing.assert_allclose(row_normalize(g), [[0.5, 0.5], [0.5, 0.5]])


def test_row_normalize_zero_row_errors():
    A = np.array([[1.0, 0.0], [0.0, 0.0]])
    g = _fresh_graph(A, [(2, 1)])
    with pytest.raises(ZeroDegreeError):
        row_normalize(g)


def test_row_normalize_equals_softmax():
    rng = np.random.default_rng(3)
    for _ in range(5):
        Q, K = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
        P = row_normalize(build_qk_affinity(Q, K, d_l=4))
        logits = Q @ K.T / np.sqrt(4.0)
        softmax = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(P, softmax, atol=1e-6)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# sparsify_topc
# ---------------------------------------------------------------------------


def _single_image_graph(rows):
    A = np.asarray(rows, dtype=float)
    return _fresh_graph(A, [(A.shape[0], 1)])


def test_sparsify_keeps_row_topc():
    g = _single_image_graph(
        [[0.1, 0.9, 0.8], [0.9, 0.1, 0.8], [0.8, 0.9, 0.1]]
    )
    out = sparsify_topc(g, GraphConfig(c_intra=1, c_inter=0))
    dense = out.matrix.toarray()
    # brute-force oracle: per row keep only the max entry
    expect = np.zeros((3, 3))
    for i in range(3):
        j = int(np.argmax(g.matrix[i]))
        expect[i, j] = g.matrix[i, j]
    np.testing.assert_allclose(dense, expect)


def test_sparsify_large_budget_is_noop():
    rng = np.random.default_rng(5)
    A = rng.random((4, 4)) + 0.1
    g = _single_image_graph(A)
    out = sparsify_topc(g, GraphConfig(c_intra=10, c_inter=0))
    np.testing.assert_allclose(out.matrix.toarray(), A)


def test_sparsify_threshold_isolates_node():
    rng = np.random.default_rng(6)
    # qk-style: unit-norm queries and keys with q_i != k_i, so every dot
    # product (diagonal included) is strictly below 1
    Q = rng.standard_normal((4, 3))
    K = rng.standard_normal((4, 3))
    Q /= np.linalg.norm(Q, axis=1, keepdims=True)
    K /= np.linalg.norm(K, axis=1, keepdims=True)
    A = np.clip(Q @ K.T, 0.0, None)
    assert (A < 1.0).all()
    g = _single_image_graph(A)
    with pytest.raises(IsolatedNodeError):
        sparsify_topc(g, GraphConfig(c_intra=2, c_inter=0, threshold=1.0))


def test_sparsify_idempotent():
    rng = np.random.default_rng(7)
    A = rng.random((6, 6))
    g = _fresh_graph(A, [(3, 1), (3, 1)])
    cfg = GraphConfig(c_intra=2, c_inter=1)
    once = sparsify_topc(g, cfg)
    twice = sparsify_topc(once, cfg)
    assert (once.matrix != twice.matrix).nnz == 0
    np.testing.assert_allclose(once.degrees, twice.degrees)


def test_sparsify_respects_block_budgets_exhaustively():
    rng = np.random.default_rng(8)
    # B=3 images of 2x2 tokens each
    n_img, tokens = 3, 4
    A = rng.random((n_img * tokens, n_img * tokens)) + 0.01
    g = _fresh_graph(A, [(2, 2)] * n_img)
    cfg = GraphConfig(c_intra=2, c_inter=1)
    out = sparsify_topc(g, cfg)
    dense = out.matrix.toarray()
    for i in range(n_img * tokens):
        own = i // tokens
        for b in range(n_img):
            cols = slice(b * tokens, (b + 1) * tokens)
            nnz = int((dense[i, cols] > 0).sum())
            if b == own:
                assert nnz <= cfg.c_intra
            else:
                # inter budget is shared across all other images
                pass
        inter_nnz = int(
            (dense[i] > 0).sum() - (dense[i, own * tokens : (own + 1) * tokens] > 0).sum()
        )
        assert inter_nnz <= cfg.c_inter
        # retained entries are the brute-force largest in each scope
        row = A[i].copy()
        intra_cols = np.arange(own * tokens, (own + 1) * tokens)
        inter_cols = np.setdiff1d(np.arange(n_img * tokens), intra_cols)
        best_intra = intra_cols[np.argsort(-row[intra_cols])[: cfg.c_intra]]
        best_inter = inter_cols[np.argsort(-row[inter_cols])[: cfg.c_inter]]
        expect_cols = np.sort(np.concatenate([best_intra, best_inter]))
        np.testing.assert_array_equal(np.where(dense[i] > 0)[0], expect_cols)


def test_batch_graph_block_structure_intra_only():
    rng = np.random.default_rng(9)
    A = rng.random((9, 9)) + 0.01
    g = _fresh_graph(A, [(3, 1)] * 3)
    out = sparsify_topc(g, GraphConfig(c_intra=2, c_inter=0))
    dense = out.matrix.toarray()
    for i in range(9):
        own = i // 3
        outside = np.concatenate([dense[i, : own * 3], dense[i, (own + 1) * 3 :]])
        assert (outside == 0).all()


# ---------------------------------------------------------------------------
# build_batch_graph
# ---------------------------------------------------------------------------


def _one_token_bundle(tmp_path, name, vec):
    arr = np.asarray(vec, dtype=np.float32).reshape(1, 1, -1)
    path = _manifest_with(
        tmp_path / name,
        [
            ("q", "query", 0, 0, 0, arr),
            ("k", "key", 0, 0, 0, arr),
            ("v", "value", 0, 0, 0, arr),
        ],
    )
    bundle = load_bundle(path)
    bundle.image_id = name
    return bundle


def test_batch_graph_two_orthogonal_tokens(tmp_path):
    b1 = _one_token_bundle(tmp_path, "a", [1.0, 0.0])
    b2 = _one_token_bundle(tmp_path, "b", [0.0, 1.0])
    spec = BatchSpec.from_bundles([b1, b2], [0])
    cfg = GraphConfig(c_intra=1, c_inter=1)
    g = build_batch_graph([b1, b2], 0, "qk", cfg, spec)
    dense = g.matrix.toarray()
    # pre-clamp full matrix is [[1,0],[0,1]]; clamp + top-c leave it unchanged
    np.testing.assert_allclose(dense, np.eye(2))
    # orthogonal vectors across images: zero retained inter edges
    assert dense[0, 1] == 0 and dense[1, 0] == 0


def test_batch_graph_duplicate_images_have_equal_blocks(tmp_path):
    rng = np.random.default_rng(11)
    feats = rng.standard_normal((4, 3)).astype(np.float32)

    def mk(name):
        arrs = feats.reshape(2, 2, 3)
        path = _manifest_with(
            tmp_path / name,
            [
                ("q", "query", 0, 0, 0, arrs),
                ("k", "key", 0, 0, 0, arrs),
                ("v", "value", 0, 0, 0, arrs),
            ],
        )
        b = load_bundle(path)
        b.image_id = name
        return b

    b1, b2 = mk("x"), mk("y")
    spec = BatchSpec.from_bundles([b1, b2], [0])
    # full budgets so nothing is pruned; duplicated images give equal blocks
    cfg = GraphConfig(c_intra=4, c_inter=4)
    g = build_batch_graph([b1, b2], 0, "vv", cfg, spec)
    dense = g.matrix.toarray()
    np.testing.assert_allclose(dense[:4, :4], dense[4:, 4:], atol=1e-12)
    np.testing.assert_allclose(dense[:4, 4:], dense[:4, :4], atol=1e-12)


def test_batch_graph_zero_vector_names_node(tmp_path):
    b1 = _one_token_bundle(tmp_path, "a", [0.0, 0.0])
    b2 = _one_token_bundle(tmp_path, "b", [0.0, 1.0])
    spec = BatchSpec.from_bundles([b1, b2], [0])
    with pytest.raises(GraphError, match="node 0"):
        build_batch_graph([b1, b2], 0, "qk", GraphConfig(), spec)


def test_batch_graph_resolution_cap(tmp_path):
    rng = np.random.default_rng(12)
    arr = rng.standard_normal((4, 4, 2)).astype(np.float32)
    path = _manifest_with(
        tmp_path / "big",
        [
            ("q", "query", 0, 0, 0, arr),
            ("k", "key", 0, 0, 0, arr),
            ("v", "value", 0, 0, 0, arr),
        ],
    )
    b = load_bundle(path)
    spec = BatchSpec.from_bundles([b], [0])
    cfg = GraphConfig(max_resolution=(2, 2))
    with pytest.raises(GraphError, match="exceeds"):
        build_batch_graph([b], 0, "qk", cfg, spec)


def test_empty_batch_rejected():
    with pytest.raises(GraphError):
        BatchSpec.from_bundles([], [0])


# ---------------------------------------------------------------------------
# assemble_per_image_set
# ---------------------------------------------------------------------------


def _multi_head_bundle(tmp_path, layers, heads):
    rng = np.random.default_rng(13)
    tensors = []
    for layer in range(layers):
        for head in range(heads):
            q = rng.standard_normal((2, 2, 3)).astype(np.float32)
            k = rng.standard_normal((2, 2, 3)).astype(np.float32)
            tensors.append((f"q{layer}_{head}", "query", layer, head, 0, q))
            tensors.append((f"k{layer}_{head}", "key", layer, head, 0, k))
    return load_bundle(_manifest_with(tmp_path, tensors))


def test_per_image_set_counts(tmp_path):
    bundle = _multi_head_bundle(tmp_path, layers=2, heads=3)
    assert len(assemble_per_image_set(bundle, "independent_heads")) == 6
    assert len(assemble_per_image_set(bundle, "concatenated")) == 2


def test_per_image_set_stable_diffusion_scale(tmp_path):
    # 16 layers x 8 heads -> 128 independent graphs
    rng = np.random.default_rng(14)
    tensors = []
    for layer in range(16):
        for head in range(8):
            q = rng.standard_normal((1, 2, 1)).astype(np.float32)
            tensors.append((f"q{layer}_{head}", "query", layer, head, 0, q))
            tensors.append((f"k{layer}_{head}", "key", layer, head, 0, q))
    bundle = load_bundle(_manifest_with(tmp_path, tensors))
    graphs = assemble_per_image_set(bundle, "independent_heads")
    assert len(graphs) == 16 * 8 == 128


def test_per_image_set_concat_dims(tmp_path):
    bundle = _multi_head_bundle(tmp_path, layers=1, heads=3)
    (g,) = assemble_per_image_set(bundle, "concatenated")
    assert g.n_nodes == 4
    assert g.grid_shapes == [(2, 2)]


def test_per_image_set_no_pairs(tmp_path):
    arr = np.zeros((1, 1, 1), dtype=np.float32)
    bundle = load_bundle(_manifest_with(tmp_path, [("v", "value", 0, 0, 0, arr)]))
    with pytest.raises(GraphError):
        assemble_per_image_set(bundle, "independent_heads")


def test_every_graph_satisfies_invariants(tmp_path):
    bundle = _multi_head_bundle(tmp_path, layers=2, heads=2)
    for g in assemble_per_image_set(bundle, "independent_heads"):
        g.validate()

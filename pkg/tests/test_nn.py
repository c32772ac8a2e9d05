"""Encoder parameters, MLP and attention layers, and the gradient checker."""

import numpy as np
import pytest

from planmatch.datagen import GenParams, generate_floorplan
from planmatch.graphs import (
    augment_edges,
    compute_feature_stats,
    relabel_nodes,
    standardize_features,
)
from planmatch.nn import (
    ArchConfig,
    AttentionEdges,
    EncoderError,
    EncoderParams,
    GradCheckError,
    Mode,
    WeightsError,
    attention_normalize,
    encoder_backward,
    encoder_forward,
    gatv2_layer_backward,
    gatv2_layer_forward,
    gatv2_scores,
    grad_check,
    load_weights,
    mlp_backward,
    mlp_forward,
    save_weights,
)

SMALL_ARCH = ArchConfig(
    mlp_hidden_dim=8, embed_dim=6, n_heads=2, gat_hidden_dim=6, output_dim=3)


def standardized_plan(seed, rooms=3):
    g = augment_edges(generate_floorplan(GenParams(rooms_min=rooms, rooms_max=rooms, seed=seed)))
    return standardize_features(g, compute_feature_stats([g]))


# ---------------------------------------------------------------------------
# Parameter container and weights format


def test_tensor_shapes_canonical():
    shapes = ArchConfig().tensor_shapes()
    names = list(shapes)
    assert names[:4] == ["mlp.W1", "mlp.b1", "mlp.W2", "mlp.b2"]
    assert names[4:7] == ["gat1.h0.Wa", "gat1.h0.a", "gat1.h0.Wh"]
    assert names[-1] == "gat2.h3.Wh"
    assert shapes["mlp.W1"] == (64, 7)
    assert shapes["gat1.h2.Wa"] == (16, 128)
    assert shapes["gat1.h2.Wh"] == (16, 64)
    assert shapes["gat2.h0.Wa"] == (32, 128)
    assert shapes["gat2.h0.a"] == (32,)


def test_parameter_count():
    assert EncoderParams.initialize(seed=0).n_scalars() == 41728


def test_initialize_deterministic_and_bounded():
    p1 = EncoderParams.initialize(seed=4)
    p2 = EncoderParams.initialize(seed=4)
    p3 = EncoderParams.initialize(seed=5)
    assert all(np.array_equal(p1.tensors[n], p2.tensors[n]) for n in p1.tensors)
    assert any(not np.array_equal(p1.tensors[n], p3.tensors[n]) for n in p1.tensors)
    assert np.array_equal(p1.tensors["mlp.b1"], np.zeros(64))
    W1 = p1.tensors["mlp.W1"]
    bound = np.sqrt(6.0 / (7 + 64))
    assert np.abs(W1).max() < bound
    a = p1.tensors["gat1.h0.a"]
    assert np.abs(a).max() < np.sqrt(6.0 / (16 + 1))


def test_params_constructor_rejects_mismatch():
    arch = ArchConfig()
    good = EncoderParams.initialize(arch, seed=0).tensors
    missing = dict(good)
    del missing["mlp.W2"]
    with pytest.raises(WeightsError):
        EncoderParams(arch, missing)
    extra = dict(good)
    extra["bonus"] = np.zeros(3)
    with pytest.raises(WeightsError):
        EncoderParams(arch, extra)
    badshape = dict(good)
    badshape["mlp.b1"] = np.zeros(65)
    with pytest.raises(WeightsError):
        EncoderParams(arch, badshape)


def test_arch_validation():
    with pytest.raises(WeightsError):
        ArchConfig(n_heads=3).validate()  # 64 not divisible by 3
    with pytest.raises(WeightsError):
        ArchConfig(mlp_dropout_p=1.0).validate()
    with pytest.raises(WeightsError):
        ArchConfig().layer_dims(3)


def test_weights_roundtrip_exact(tmp_path):
    params = EncoderParams.initialize(seed=9)
    g = standardized_plan(0)
    stats = compute_feature_stats([g])
    path = tmp_path / "weights.json"
    save_weights(path, params, stats)
    loaded, loaded_stats = load_weights(path)
    for name, tensor in params.named():
        assert np.array_equal(loaded.tensors[name], tensor)
    assert np.array_equal(loaded_stats.mean, stats.mean)
    assert np.array_equal(loaded_stats.std, stats.std)


def test_load_weights_rejects_corruption(tmp_path):
    import json

    params = EncoderParams.initialize(seed=0)
    stats = compute_feature_stats([standardized_plan(1)])
    path = tmp_path / "w.json"
    save_weights(path, params, stats)
    payload = json.loads(path.read_text())

    bad = dict(payload)
    bad["format_version"] = 77
    path.write_text(json.dumps(bad))
    with pytest.raises(WeightsError):
        load_weights(path)

    bad = json.loads(json.dumps(payload))
    bad["tensors"][0]["data"][0] = None
    path.write_text(json.dumps(bad).replace("null", "NaN"))
    with pytest.raises(WeightsError):
        load_weights(path)

    bad = json.loads(json.dumps(payload))
    del bad["tensors"][3]
    path.write_text(json.dumps(bad))
    with pytest.raises(WeightsError):
        load_weights(path)

    bad = json.loads(json.dumps(payload))
    bad["tensors"][0]["shape"] = [7, 64]
    path.write_text(json.dumps(bad))
    with pytest.raises(WeightsError):
        load_weights(path)

    path.write_text("{broken")
    with pytest.raises(WeightsError):
        load_weights(path)


# ---------------------------------------------------------------------------
# Attention edge grouping


def test_attention_edges_sorted_and_grouped():
    edges = AttentionEdges.from_arrays([2, 0, 1], [1, 1, 0], n_nodes=3)
    assert edges.src.tolist() == [1, 0, 2]
    assert edges.dst.tolist() == [0, 1, 1]
    assert edges.group_ptr.tolist() == [0, 1]
    assert edges.group_dst.tolist() == [0, 1]
    assert edges.edge_group.tolist() == [0, 1, 1]


def test_attention_edges_from_graph_adds_self_loops():
    g = standardized_plan(3)
    edges = AttentionEdges.from_graph(g)
    assert edges.n_edges == len(g.edges) + g.n_nodes
    pairs = set(zip(edges.src.tolist(), edges.dst.tolist()))
    for i in range(g.n_nodes):
        assert (i, i) in pairs


def test_attention_edges_validation():
    with pytest.raises(EncoderError):
        AttentionEdges.from_arrays([], [], n_nodes=0)
    with pytest.raises(EncoderError):
        AttentionEdges.from_arrays([0], [5], n_nodes=3)


# ---------------------------------------------------------------------------
# MLP


def test_mlp_identity_weights_pass_features_through():
    params = EncoderParams.initialize(seed=0)
    t = params.tensors
    t["mlp.W1"][:] = np.eye(64, 7)
    t["mlp.b1"][:] = 0.0
    t["mlp.W2"][:] = np.eye(64)
    t["mlp.b2"][:] = 0.0
    X = np.array([[1.0, 0.0, 2.0, -3.0, 0.5, -0.5, 4.0]])
    H0, _ = mlp_forward(X, params)
    expected = np.zeros(64)
    expected[:7] = np.maximum(X[0], 0.0)
    assert np.array_equal(H0[0], expected)


def test_mlp_matches_naive_loops():
    params = EncoderParams.initialize(seed=3)
    t = params.tensors
    rng = np.random.default_rng(0)
    t["mlp.b1"][:] = rng.normal(size=64)
    t["mlp.b2"][:] = rng.normal(size=64)
    X = rng.normal(size=(3, 7))
    H0, _ = mlp_forward(X, params)

    def layer(inp, W, b):
        out = np.zeros((inp.shape[0], W.shape[0]))
        for i in range(inp.shape[0]):
            for j in range(W.shape[0]):
                s = b[j]
                for k in range(inp.shape[1]):
                    s += W[j, k] * inp[i, k]
                out[i, j] = max(s, 0.0)
        return out

    expected = layer(layer(X, t["mlp.W1"], t["mlp.b1"]), t["mlp.W2"], t["mlp.b2"])
    assert np.abs(H0 - expected).max() < 1e-12


def test_mlp_train_mode_masks_reproducible():
    params = EncoderParams.initialize(seed=1)
    X = np.random.default_rng(2).normal(size=(5, 7))
    out1, _ = mlp_forward(X, params, mode=Mode.TRAIN, rng=np.random.default_rng(7))
    out2, _ = mlp_forward(X, params, mode=Mode.TRAIN, rng=np.random.default_rng(7))
    out3, _ = mlp_forward(X, params, mode=Mode.TRAIN, rng=np.random.default_rng(8))
    eval_out, _ = mlp_forward(X, params)
    assert np.array_equal(out1, out2)
    assert not np.array_equal(out1, out3)
    assert not np.array_equal(out1, eval_out)


def test_mlp_train_mode_draw_order_replay():
    """Inverted dropout with masks drawn layer 1 first, then layer 2."""
    params = EncoderParams.initialize(seed=1)
    t = params.tensors
    p = params.arch.mlp_dropout_p
    X = np.random.default_rng(2).normal(size=(5, 7))
    out, _ = mlp_forward(X, params, mode=Mode.TRAIN, rng=np.random.default_rng(7))

    r = np.random.default_rng(7)
    R1 = np.maximum(X @ t["mlp.W1"].T + t["mlp.b1"], 0.0)
    D1 = R1 * (r.random(R1.shape) >= p) / (1.0 - p)
    R2 = np.maximum(D1 @ t["mlp.W2"].T + t["mlp.b2"], 0.0)
    expected = R2 * (r.random(R2.shape) >= p) / (1.0 - p)
    assert np.array_equal(out, expected)


def test_mlp_rejects_bad_input():
    params = EncoderParams.initialize(seed=0)
    with pytest.raises(EncoderError):
        mlp_forward(np.zeros((2, 6)), params)
    with pytest.raises(EncoderError):
        mlp_forward(np.full((2, 7), np.nan), params)
    with pytest.raises(EncoderError):
        mlp_forward(np.zeros((2, 7)), params, mode=Mode.TRAIN, rng=None)


def test_mlp_backward_finite_difference():
    params = EncoderParams.initialize(SMALL_ARCH, seed=5)
    rng = np.random.default_rng(1)
    # Nonzero biases keep every pre-activation away from the ReLU kink, where
    # finite differences disagree with any subgradient choice.
    params.tensors["mlp.b1"][:] = rng.normal(size=SMALL_ARCH.mlp_hidden_dim) * 0.3
    params.tensors["mlp.b2"][:] = rng.normal(size=SMALL_ARCH.embed_dim) * 0.3
    X = rng.normal(size=(4, 7))
    G = rng.normal(size=(4, SMALL_ARCH.embed_dim))

    def f(tensors):
        out, cache = mlp_forward(X, params, mode=Mode.TRAIN, rng=np.random.default_rng(3))
        loss = float((out * G).sum())
        grads = params.zero_grads()
        mlp_backward(cache, params, G, grads)
        return loss, grads

    subset = {n: params.tensors[n] for n in ("mlp.W1", "mlp.b1", "mlp.W2", "mlp.b2")}
    report = grad_check(f, subset, eps=1e-6)
    assert report.max_rel_error < 1e-6


def test_mlp_backward_input_gradient():
    params = EncoderParams.initialize(SMALL_ARCH, seed=6)
    rng = np.random.default_rng(2)
    X = rng.normal(size=(3, 7))
    G = rng.normal(size=(3, SMALL_ARCH.embed_dim))
    out, cache = mlp_forward(X, params)
    gX = mlp_backward(cache, params, G, params.zero_grads())
    eps = 1e-6
    for i in range(3):
        for k in range(7):
            Xp = X.copy(); Xp[i, k] += eps
            Xm = X.copy(); Xm[i, k] -= eps
            num = ((mlp_forward(Xp, params)[0] * G).sum()
                   - (mlp_forward(Xm, params)[0] * G).sum()) / (2 * eps)
            assert abs(gX[i, k] - num) < 1e-5 * max(1.0, abs(num))


# ---------------------------------------------------------------------------
# Attention scores and normalization


def test_gatv2_scores_hand_example():
    H = np.array([[1.0]])
    src = np.array([0])
    dst = np.array([0])
    Wa = np.array([[1.0, 1.0]])
    a = np.array([1.0])
    assert gatv2_scores(H, src, dst, Wa, a).tolist() == [2.0]
    # Negative input goes through the leaky slope.
    assert gatv2_scores(np.array([[-1.0]]), src, dst, Wa, a).tolist() == [
        pytest.approx(-0.4)
    ]


def test_gatv2_scores_shape_check():
    with pytest.raises(EncoderError):
        gatv2_scores(np.zeros((2, 3)), np.array([0]), np.array([1]),
                     np.zeros((4, 5)), np.zeros(4))


def test_attention_normalize_examples():
    single = AttentionEdges.from_arrays([1], [0], n_nodes=2)
    assert attention_normalize(np.array([3.7]), single).tolist() == [1.0]

    two = AttentionEdges.from_arrays([0, 1], [2, 2], n_nodes=3)
    assert attention_normalize(np.array([1.25, 1.25]), two).tolist() == [0.5, 0.5]
    got = attention_normalize(np.array([0.0, np.log(3.0)]), two)
    assert got == pytest.approx([0.25, 0.75])


def test_attention_normalize_groups_are_independent():
    edges = AttentionEdges.from_arrays([0, 1, 2, 0], [1, 1, 0, 2], n_nodes=3)
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(edges.n_edges, 3))
    alpha = attention_normalize(logits, edges)
    for g, ptr in enumerate(edges.group_ptr):
        end = edges.group_ptr[g + 1] if g + 1 < len(edges.group_ptr) else edges.n_edges
        assert np.allclose(alpha[ptr:end].sum(axis=0), 1.0)


def test_attention_dropout_scales_survivors():
    edges = AttentionEdges.from_arrays([0, 1, 2], [1, 1, 1], n_nodes=3)
    logits = np.array([0.3, -0.2, 0.9])
    base = attention_normalize(logits, edges)
    dropped = attention_normalize(
        logits, edges, mode=Mode.TRAIN, dropout_p=0.5, rng=np.random.default_rng(0))
    kept = dropped != 0.0
    assert np.allclose(dropped[kept], base[kept] / 0.5)
    with pytest.raises(EncoderError):
        attention_normalize(logits, edges, mode=Mode.TRAIN, dropout_p=0.5)


def test_attention_normalize_requires_logit_per_edge():
    edges = AttentionEdges.from_arrays([0, 1], [1, 0], n_nodes=2)
    with pytest.raises(EncoderError):
        attention_normalize(np.array([1.0]), edges)


# ---------------------------------------------------------------------------
# Full attention layers against a dense oracle


def dense_layer_oracle(H, edges, params, layer):
    """Per-head dense recomputation of one Eval-mode attention layer."""
    arch = params.arch
    d_in, d_head = arch.layer_dims(layer)
    n = H.shape[0]
    outs = []
    for h in range(arch.n_heads):
        Wa = params.tensors[f"gat{layer}.h{h}.Wa"]
        a = params.tensors[f"gat{layer}.h{h}.a"]
        Wh = params.tensors[f"gat{layer}.h{h}.Wh"]
        logits = {}
        for s, d in zip(edges.src.tolist(), edges.dst.tolist()):
            q = Wa[:, :d_in] @ H[s] + Wa[:, d_in:] @ H[d]
            r = np.where(q >= 0, q, arch.leaky_slope * q)
            logits[(s, d)] = float(a @ r)
        out = np.zeros((n, d_head))
        for v in range(n):
            incoming = [s for s, d in logits if d == v]
            if not incoming:
                continue
            ls = np.array([logits[(s, v)] for s in incoming])
            w = np.exp(ls - ls.max())
            w /= w.sum()
            for wi, s in zip(w, incoming):
                out[v] += wi * (Wh @ H[s])
        outs.append(out)
    if layer == 1:
        return np.maximum(np.concatenate(outs, axis=1), 0.0)
    return np.mean(outs, axis=0)


def random_edges(rng, n):
    pairs = {
        (int(s), int(d))
        for s, d in zip(rng.integers(0, n, size=2 * n), rng.integers(0, n, size=2 * n))
    }
    pairs |= {(i, i) for i in range(n)}  # self loops, and no duplicate edges
    src, dst = zip(*sorted(pairs))
    return AttentionEdges.from_arrays(np.array(src), np.array(dst), n)


def fd_assert_grads(loss_fn, tensors, grads, abs_tol=1e-7, rel_tol=1e-4):
    """Central-difference check with a mixed tolerance.

    Coordinates whose true gradient is structurally zero measure nothing but
    floating-point noise under finite differences, so a pure relative error
    against a tiny floor is meaningless there; the absolute term covers them.
    A coordinate that fails at the widest step is retried at smaller ones:
    when the window straddles a ReLU kink the mismatch disappears once the
    step shrinks past the kink, while a wrong analytic gradient keeps the
    same mismatch at every step size.
    """
    for name, tensor in tensors.items():
        flat = tensor.ravel()
        g = grads[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            for eps in (1e-5, 1e-6, 1e-7):
                flat[i] = orig + eps
                lp = loss_fn()
                flat[i] = orig - eps
                lm = loss_fn()
                flat[i] = orig
                num = (lp - lm) / (2.0 * eps)
                tol = abs_tol + rel_tol * max(abs(g[i]), abs(num))
                if abs(g[i] - num) <= tol:
                    break
            else:
                raise AssertionError((name, i, g[i], num))


def test_layer_forward_matches_dense_oracle():
    params = EncoderParams.initialize(SMALL_ARCH, seed=2)
    rng = np.random.default_rng(5)
    for layer in (1, 2):
        d_in, _ = SMALL_ARCH.layer_dims(layer)
        n = 7
        H = rng.normal(size=(n, d_in))
        edges = random_edges(rng, n)
        got, _ = gatv2_layer_forward(H, edges, params, layer=layer)
        want = dense_layer_oracle(H, edges, params, layer)
        assert np.abs(got - want).max() < 1e-10


def test_zero_attention_vector_means_uniform_averaging():
    params = EncoderParams.initialize(SMALL_ARCH, seed=3)
    d_in, d_head = SMALL_ARCH.layer_dims(2)
    for h in range(SMALL_ARCH.n_heads):
        params.tensors[f"gat2.h{h}.a"][:] = 0.0
        params.tensors[f"gat2.h{h}.Wh"][:] = np.eye(d_head, d_in)
    n = 5
    rng = np.random.default_rng(6)
    H = rng.normal(size=(n, d_in))
    edges = random_edges(rng, n)
    out, _ = gatv2_layer_forward(H, edges, params, layer=2)
    for v in range(n):
        incoming = edges.src[edges.dst == v]
        assert np.allclose(out[v], H[incoming].mean(axis=0)[:d_head], atol=1e-12)


def test_layer_rejects_wrong_input_width():
    params = EncoderParams.initialize(SMALL_ARCH, seed=0)
    edges = random_edges(np.random.default_rng(0), 4)
    with pytest.raises(EncoderError):
        gatv2_layer_forward(np.zeros((4, 99)), edges, params, layer=1)


def test_layer_backward_finite_difference():
    params = EncoderParams.initialize(SMALL_ARCH, seed=7)
    rng = np.random.default_rng(8)
    for layer, mode in [(1, Mode.EVAL), (2, Mode.EVAL), (1, Mode.TRAIN), (2, Mode.TRAIN)]:
        d_in, _ = SMALL_ARCH.layer_dims(layer)
        n = 6
        H = rng.normal(size=(n, d_in))
        edges = random_edges(rng, n)
        out_dim = SMALL_ARCH.gat_hidden_dim if layer == 1 else SMALL_ARCH.output_dim
        G = rng.normal(size=(n, out_dim))

        def loss_fn():
            out, _ = gatv2_layer_forward(
                H, edges, params, layer=layer, mode=mode,
                rng=np.random.default_rng(123))
            return float((out * G).sum())

        _, cache = gatv2_layer_forward(
            H, edges, params, layer=layer, mode=mode, rng=np.random.default_rng(123))
        grads = params.zero_grads()
        gatv2_layer_backward(cache, params, edges, G, grads)
        names = [f"gat{layer}.h{h}.{t}" for h in range(2) for t in ("Wa", "a", "Wh")]
        subset = {name: params.tensors[name] for name in names}
        fd_assert_grads(loss_fn, subset, grads)


def test_layer_backward_input_gradient():
    params = EncoderParams.initialize(SMALL_ARCH, seed=9)
    rng = np.random.default_rng(10)
    d_in, _ = SMALL_ARCH.layer_dims(1)
    n = 5
    H = rng.normal(size=(n, d_in))
    edges = random_edges(rng, n)
    G = rng.normal(size=(n, SMALL_ARCH.gat_hidden_dim))
    out, cache = gatv2_layer_forward(H, edges, params, layer=1)
    gH = gatv2_layer_backward(cache, params, edges, G, params.zero_grads())
    eps = 1e-6
    num = np.zeros_like(H)
    for i in range(n):
        for k in range(d_in):
            Hp = H.copy(); Hp[i, k] += eps
            Hm = H.copy(); Hm[i, k] -= eps
            lp = (gatv2_layer_forward(Hp, edges, params, layer=1)[0] * G).sum()
            lm = (gatv2_layer_forward(Hm, edges, params, layer=1)[0] * G).sum()
            num[i, k] = (lp - lm) / (2 * eps)
    assert np.abs(gH - num).max() < 1e-6


# ---------------------------------------------------------------------------
# Full encoder


def test_encoder_output_shape_and_determinism():
    g = standardized_plan(11)
    params = EncoderParams.initialize(seed=0)
    H1, _ = encoder_forward(g, params)
    H2, _ = encoder_forward(g, params)
    assert H1.shape == (g.n_nodes, 32)
    assert np.array_equal(H1, H2)


def test_encoder_requires_features():
    g = augment_edges(generate_floorplan(GenParams(seed=0)))
    with pytest.raises(EncoderError):
        encoder_forward(g, EncoderParams.initialize(seed=0))


def test_encoder_train_mode_reproducible_by_seed():
    g = standardized_plan(12)
    params = EncoderParams.initialize(seed=1)
    a, _ = encoder_forward(g, params, mode=Mode.TRAIN, rng=np.random.default_rng(5))
    b, _ = encoder_forward(g, params, mode=Mode.TRAIN, rng=np.random.default_rng(5))
    c, _ = encoder_forward(g, params, mode=Mode.TRAIN, rng=np.random.default_rng(6))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_encoder_permutation_equivariance():
    params = EncoderParams.initialize(seed=2)
    rng = np.random.default_rng(13)
    for seed in range(10):
        g = standardized_plan(seed, rooms=int(rng.integers(2, 5)))
        H, _ = encoder_forward(g, params)
        perm = list(rng.permutation(g.n_nodes))
        Hp, _ = encoder_forward(relabel_nodes(g, perm), params)
        assert np.abs(Hp[perm] - H).max() < 1e-12


def test_encoder_backward_matches_finite_differences():
    g = standardized_plan(14, rooms=2)
    params = EncoderParams.initialize(SMALL_ARCH, seed=4)
    rng = np.random.default_rng(15)
    # A node whose hidden row goes fully dead leaves its second pre-activation
    # exactly at the bias; with zero biases that puts finite differences on the
    # ReLU kink. Nonzero biases keep the check away from it.
    params.tensors["mlp.b1"][:] = rng.normal(size=SMALL_ARCH.mlp_hidden_dim) * 0.3
    params.tensors["mlp.b2"][:] = rng.normal(size=SMALL_ARCH.embed_dim) * 0.3
    G = rng.normal(size=(g.n_nodes, SMALL_ARCH.output_dim))

    def loss_fn():
        H, _ = encoder_forward(g, params, mode=Mode.TRAIN, rng=np.random.default_rng(77))
        return float((H * G).sum())

    H, cache = encoder_forward(g, params, mode=Mode.TRAIN, rng=np.random.default_rng(77))
    grads = encoder_backward(cache, params, G)
    fd_assert_grads(loss_fn, params.tensors, grads)


# ---------------------------------------------------------------------------
# Gradient checker harness


def test_grad_check_passes_exact_linear_map():
    rng = np.random.default_rng(16)
    c = {"w": rng.normal(size=(3, 2)), "v": rng.normal(size=4)}
    tensors = {"w": rng.normal(size=(3, 2)), "v": rng.normal(size=4)}

    def f(ts):
        loss = float(sum((ts[k] * c[k]).sum() for k in ts))
        return loss, {k: c[k].copy() for k in ts}

    report = grad_check(f, tensors, eps=1e-5)
    assert report.max_rel_error < 1e-7
    assert report.n_checked == 10


def test_grad_check_flags_corrupted_gradient():
    c = np.array([1.0, 2.0, 3.0])
    tensors = {"w": np.array([0.1, 0.2, 0.3])}

    def f(ts):
        grads = {"w": c.copy()}
        grads["w"][1] += 0.5  # wrong on purpose
        return float((ts["w"] * c).sum()), grads

    report = grad_check(f, tensors)
    assert report.max_rel_error > 0.1
    assert report.worst_tensor == "w"
    assert report.worst_index == (1,)


def test_grad_check_rejects_nondeterministic_f():
    state = {"n": 0}

    def f(ts):
        state["n"] += 1
        return float(state["n"]), {"w": np.zeros(2)}

    with pytest.raises(GradCheckError):
        grad_check(f, {"w": np.zeros(2)})


def test_grad_check_rejects_bad_outputs():
    with pytest.raises(GradCheckError):
        grad_check(lambda ts: (np.nan, {"w": np.zeros(2)}), {"w": np.zeros(2)})
    with pytest.raises(GradCheckError):
        grad_check(lambda ts: (0.0, {}), {"w": np.zeros(2)})
    with pytest.raises(GradCheckError):
        grad_check(lambda ts: (0.0, {"w": np.zeros(3)}), {"w": np.zeros(2)})


def test_grad_check_rejects_non_contiguous_tensor():
    w = np.zeros((4, 4))[::2]

    def f(ts):
        return 0.0, {"w": np.zeros_like(ts["w"])}

    with pytest.raises(GradCheckError):
        grad_check(f, {"w": w})


def test_grad_check_rejects_disagreeing_loss_f():
    tensors = {"w": np.ones(2)}

    def f(ts):
        return float(ts["w"].sum()), {"w": np.ones(2)}

    with pytest.raises(GradCheckError):
        grad_check(f, tensors, loss_f=lambda ts: float(ts["w"].sum()) + 1.0)


def test_grad_check_loss_f_used_for_fd():
    rng = np.random.default_rng(17)
    c = rng.normal(size=5)
    tensors = {"w": rng.normal(size=5)}

    def f(ts):
        return float((ts["w"] * c).sum()), {"w": c.copy()}

    report = grad_check(f, tensors, loss_f=lambda ts: float((ts["w"] * c).sum()))
    assert report.max_rel_error < 1e-7

import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from _fd import gradcheck, numeric_grad, relative_error
from wifipose.errors import ConfigError, DataError
from wifipose.pose_decoder import (
    BUILTIN_SKELETONS,
    FeedForward,
    PoseDecoder,
    SkeletonGraph,
    attention_block,
    build_joint_tokens,
    ffn_regress,
    gcn_layer,
    load_skeleton,
    loss_pose,
    make_head,
    skeleton_registry,
)

D = torch.float64


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def chain(J):
    return SkeletonGraph("chain", [f"j{i}" for i in range(J)], [(i, i + 1) for i in range(J - 1)])


def random_tree(J, gen):
    edges = [(int(gen.integers(i)), i) for i in range(1, J)]
    return SkeletonGraph("tree", [f"j{i}" for i in range(J)], edges)


# -- registry -----------------------------------------------------------------------


def test_registry_sizes_and_names():
    mm = skeleton_registry("mmfi17")
    assert mm.J == 17 and {"Bot Torso", "L.Hand", "R.Hand"} <= set(mm.joint_names)
    wp = skeleton_registry("wipose18")
    assert wp.J == 18 and {"Nose", "L.Ear"} <= set(wp.joint_names)
    pw = skeleton_registry("piw3d14")
    assert pw.J == 14 and {"Neck", "R.Ankle"} <= set(pw.joint_names)


def test_registry_unknown_id():
    with pytest.raises(ConfigError, match="unknown skeleton"):
        skeleton_registry("h36m")


@pytest.mark.parametrize("sid", BUILTIN_SKELETONS)
def test_builtin_graphs_are_trees(sid):
    g = skeleton_registry(sid)
    assert len(g.edges) == g.J - 1
    A = g.adjacency
    np.testing.assert_array_equal(A, A.T)
    assert not np.diag(A).any()
    np.testing.assert_array_equal(np.diag(g.degree), A.sum(axis=1) + 1)


def test_mmfi_kinematic_edges():
    g = skeleton_registry("mmfi17")
    name = {n: i for i, n in enumerate(g.joint_names)}
    edges = {frozenset(e) for e in g.edges}
    for a, b in [("Bot Torso", "L.Hip"), ("Bot Torso", "R.Hip"), ("Bot Torso", "Center Torso"),
                 ("Neck Base", "L.Shoulder"), ("L.Elbow", "L.Hand")]:
        assert frozenset((name[a], name[b])) in edges


@pytest.mark.parametrize("sid", BUILTIN_SKELETONS)
def test_operator_symmetric_spectral_radius(sid):
    op = skeleton_registry(sid).normalized_operator()
    np.testing.assert_allclose(op, op.T, atol=1e-15)
    assert np.abs(np.linalg.eigvalsh(op)).max() <= 1 + 1e-12


def test_graph_validation():
    with pytest.raises(ConfigError, match="not connected"):
        SkeletonGraph("x", ["a", "b", "c"], [(0, 1)])
    with pytest.raises(ConfigError, match="self edge"):
        SkeletonGraph("x", ["a", "b"], [(0, 1), (1, 1)])
    with pytest.raises(ConfigError, match="out of range"):
        SkeletonGraph("x", ["a", "b"], [(0, 2)])
    with pytest.raises(ConfigError, match="not symmetric"):
        SkeletonGraph.from_adjacency([[0, 1], [0, 0]])
    g = SkeletonGraph.from_adjacency([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert g.edges == [(0, 1), (1, 2)]


def test_skeleton_file_round_trip(tmp_path):
    g = skeleton_registry("piw3d14")
    path = tmp_path / "custom.json"
    path.write_text(json.dumps(g.to_json()))
    back = load_skeleton(path)
    assert back == g
    assert skeleton_registry(str(path)) == g


def test_torso_length_definitions():
    mm = skeleton_registry("mmfi17")
    pose = np.zeros((17, 3))
    pose[mm.joint_names.index("Neck Base")] = (0, 0, 500)
    assert mm.torso_length(pose) == 500
    wp = skeleton_registry("wipose18")
    pose = np.zeros((18, 2))
    pose[wp.joint_names.index("Neck")] = (0, 100)
    pose[wp.joint_names.index("R.Hip")] = (-10, 0)
    pose[wp.joint_names.index("L.Hip")] = (10, 0)
    assert wp.torso_length(pose) == 100


# -- build_joint_tokens ---------------------------------------------------------------


def test_joint_tokens(rng):
    lat = t(rng.normal(size=(6, 4)))
    tokens = build_joint_tokens(lat, torch.zeros(5, 4, dtype=D))
    assert tokens.shape == (5, 4)
    for row in tokens:
        torch.testing.assert_close(row, lat.mean(0))
    prompt = t(rng.normal(size=(17, 4)))
    torch.testing.assert_close(build_joint_tokens(torch.zeros(3, 4, dtype=D), prompt), prompt)
    assert build_joint_tokens(lat, prompt).shape[0] == 17


# -- gcn_layer ------------------------------------------------------------------------


def test_gcn_single_joint_identity(rng):
    g = SkeletonGraph("one", ["root"], [])
    x = t(rng.normal(size=(1, 4)))
    out = gcn_layer(x, t(g.normalized_operator()), torch.eye(4, dtype=D), activation=None)
    torch.testing.assert_close(out, x)


def test_gcn_two_joints_row_mean(rng):
    g = chain(2)
    np.testing.assert_allclose(g.normalized_operator(), np.full((2, 2), 0.5))
    x = t(rng.normal(size=(2, 3)))
    out = gcn_layer(x, t(g.normalized_operator()), torch.eye(3, dtype=D), activation=None)
    torch.testing.assert_close(out, x.mean(0).expand(2, 3))


def test_gcn_dense_oracle_and_permutation(rng):
    g = random_tree(5, rng)
    A = g.adjacency + np.eye(5)
    deg = A.sum(1)
    oracle_op = np.diag(deg ** -0.5) @ A @ np.diag(deg ** -0.5)
    x, w = rng.normal(size=(5, 4)), rng.normal(size=(4, 4))
    out = gcn_layer(t(x), t(g.normalized_operator()), t(w)).numpy()
    np.testing.assert_allclose(out, np.maximum(oracle_op @ x @ w, 0), atol=1e-9)

    perm = rng.permutation(5)
    P = np.eye(5)[perm]
    g_perm = SkeletonGraph.from_adjacency((P @ g.adjacency @ P.T).astype(int))
    out_perm = gcn_layer(t(P @ x), t(g_perm.normalized_operator()), t(w)).numpy()
    np.testing.assert_allclose(out_perm, P @ out, atol=1e-12)


# -- attention_block ------------------------------------------------------------------


def test_attention_zero_queries_uniform(rng):
    J, d = 4, 6
    x = t(rng.normal(size=(J, d)))
    zero = torch.zeros(d, d, dtype=D)
    w_v = t(rng.normal(size=(d, d)))
    out, attn = attention_block(x, zero, zero, w_v, return_weights=True)
    torch.testing.assert_close(attn, torch.full((J, J), 1 / J, dtype=D))
    expected = F.layer_norm(x + (x @ w_v).mean(0), (d,))
    torch.testing.assert_close(out, expected)


def test_attention_single_token(rng):
    x = t(rng.normal(size=(1, 5)))
    wq, wk, wv = (t(rng.normal(size=(5, 5))) for _ in range(3))
    out, attn = attention_block(x, wq, wk, wv, return_weights=True)
    assert attn.item() == 1.0
    torch.testing.assert_close(out, F.layer_norm(x + x @ wv, (5,)))


def test_attention_dense_oracle(rng):
    J, d, dk = 5, 6, 3
    x = rng.normal(size=(J, d))
    wq, wk = rng.normal(size=(d, dk)), rng.normal(size=(d, dk))
    wv = rng.normal(size=(d, d))
    gamma, beta = rng.normal(size=d), rng.normal(size=d)
    out, attn = attention_block(t(x), t(wq), t(wk), t(wv), t(gamma), t(beta), return_weights=True)
    np.testing.assert_allclose(attn.sum(-1).numpy(), 1.0, atol=1e-9)
    q, k, v = x @ wq, x @ wk, x @ wv
    logits = q @ k.T / np.sqrt(dk)
    w = np.exp(logits - logits.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    y = x + w @ v
    mu, var = y.mean(1, keepdims=True), y.var(1, keepdims=True)
    oracle = (y - mu) / np.sqrt(var + 1e-5) * gamma + beta
    np.testing.assert_allclose(out.numpy(), oracle, atol=1e-6)


# -- ffn_regress ----------------------------------------------------------------------


def test_zero_head_gives_zero_pose(rng):
    head = make_head(8, 3).double()
    torch.nn.init.zeros_(head.weight)
    torch.nn.init.zeros_(head.bias)
    _, y = ffn_regress(t(rng.normal(size=(17, 8))), FeedForward(8, 16).double(), head)
    assert y.shape == (17, 3) and not y.any()


def test_head_shapes():
    for J, C in ((17, 3), (18, 2)):
        _, y = ffn_regress(torch.zeros(J, 8, dtype=D), FeedForward(8, 8).double(), make_head(8, C).double())
        assert y.shape == (J, C)


def test_head_rowwise_oracle(rng):
    head = make_head(6, 3).double()
    ffn = FeedForward(6, 12).double()
    z_attn = t(rng.normal(size=(4, 6)))
    z, y = ffn_regress(z_attn, ffn, head)
    W, b = head.weight.detach().numpy(), head.bias.detach().numpy()
    for j in range(4):
        np.testing.assert_allclose(y[j].detach().numpy(), W @ z[j].detach().numpy() + b, atol=1e-9)
    torch.testing.assert_close(z, F.layer_norm(ffn(z_attn) + z_attn, (6,)))


# -- loss_pose ------------------------------------------------------------------------


def test_pose_loss(rng):
    y = t(rng.normal(size=(5, 3)))
    assert loss_pose(y, y).item() == 0.0
    assert abs(loss_pose(y + 0.5, y).item() - 0.25) < 1e-12
    a = rng.normal(size=(2, 5, 3))
    b = rng.normal(size=(2, 5, 3))
    oracle = sum((a[i] - b[i]).ravel() @ (a[i] - b[i]).ravel() for i in range(2)) / a.size
    assert abs(loss_pose(t(a), t(b)).item() - oracle) <= 1e-9
    with pytest.raises(DataError):
        loss_pose(torch.zeros(5, 3), torch.zeros(5, 2))


# -- gradients ------------------------------------------------------------------------


def test_gradient_pose_loss(rng):
    target = t(rng.normal(size=(4, 3)))
    assert gradcheck(lambda a: loss_pose(a, target), [t(rng.normal(size=(4, 3)))]) <= 1e-4


def test_gradient_joint_tokens(rng):
    w = t(rng.normal(size=(4, 6)))
    f = lambda lat, prompt: (build_joint_tokens(lat, prompt) * w).sum()  # noqa: E731
    assert gradcheck(f, [t(rng.normal(size=(7, 6))), t(rng.normal(size=(4, 6)))]) <= 1e-4


def test_gradient_gcn(rng):
    g = chain(4)
    op = t(g.normalized_operator())
    w_out = t(rng.normal(size=(4, 5)))
    f = lambda x, w: (gcn_layer(x, op, w, activation=torch.tanh) * w_out).sum()  # noqa: E731
    assert gradcheck(f, [t(rng.normal(size=(4, 5))), t(rng.normal(size=(5, 5)))]) <= 1e-4


def test_gradient_attention(rng):
    d = 6
    w_out = t(rng.normal(size=(4, d)))

    def f(x, wq, wk, wv, gamma, beta):
        return (attention_block(x, wq, wk, wv, gamma, beta) * w_out).sum()

    inputs = [t(rng.normal(size=s)) for s in ((4, d), (d, 3), (d, 3), (d, d), (d,), (d,))]
    assert gradcheck(f, inputs) <= 1e-4


def test_gradient_ffn_regress(rng):
    ffn, head = FeedForward(6, 8).double(), make_head(6, 3).double()
    params = list(ffn.parameters()) + list(head.parameters())
    target = t(rng.normal(size=(4, 3)))
    z_attn = t(rng.normal(size=(4, 6)))

    def f(x, *ps):
        for p, v in zip(params, ps):
            p.data = v
        return loss_pose(ffn_regress(x, ffn, head)[1], target)

    values = [z_attn] + [p.detach().clone() for p in params]
    x = z_attn.clone().requires_grad_(True)
    ana = torch.autograd.grad(loss_pose(ffn_regress(x, ffn, head)[1], target), [x, *params])
    assert relative_error(ana, numeric_grad(f, values)) <= 1e-4


def test_gradient_end_to_end_decoder(rng):
    torch.manual_seed(0)
    g = random_tree(4, rng)
    dec = PoseDecoder(g, 6, 3, ffn_dim=8).double()
    lat = t(rng.normal(size=(2, 5, 6)))
    target = t(rng.normal(size=(2, 4, 3)))
    params = [p for p in dec.parameters()]

    def f(*ps):
        for p, v in zip(params, ps):
            p.data = v
        return loss_pose(dec(lat), target)

    values = [p.detach().clone() for p in params]
    ana = torch.autograd.grad(loss_pose(dec(lat), target), params)
    assert relative_error(ana, numeric_grad(f, values)) <= 1e-4


# -- module -----------------------------------------------------------------------------


def test_decoder_shapes_and_normalisation(rng):
    dec = PoseDecoder(skeleton_registry("wipose18"), 8, 2, gcn_layers=2, attn_layers=2)
    out = dec(torch.as_tensor(rng.normal(size=(3, 10, 8)), dtype=torch.float32))
    assert out.shape == (3, 18, 2)
    with torch.no_grad():
        dec.pose_mean.fill_(5.0)
        dec.pose_scale.fill_(2.0)
    y = torch.randn(3, 18, 2)
    torch.testing.assert_close(dec.normalize(dec.denormalize(y)), y)


def test_decoder_without_prompt_collapses_joints(rng):
    dec = PoseDecoder(chain(3), 4, 3, gcn_layers=0, use_prompt=False)
    out = dec(torch.randn(1, 5, 4))
    torch.testing.assert_close(out[0, 0], out[0, 1])

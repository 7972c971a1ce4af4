"""Acceptance criteria 1 to 10.

Each test records its verdict through :func:`criterion`; ``conftest.py`` prints
one PASS/FAIL/SKIP line per criterion at the end of the session.
"""

import os
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from grelu.activations import ActivationSpec, Maxout, PReLU, build_activation, elu
from grelu.adaptive import (
    GraphContext,
    GReluConfig,
    HyperWeights,
    grelu_forward,
    hyperfunction,
    make_variant,
)
from grelu.autodiff import (
    SparseMatrix,
    Tensor,
    add,
    backward,
    concat_cols,
    exp_elem,
    finite_diff_check,
    gradient_check,
    kink_margin,
    kmax_affine,
    matmul,
    mul,
    nll_loss,
    relu,
    row_mean,
    scale,
    softmax_cols,
    softmax_rows,
    spmm,
    sub,
    sum_all,
    sum_squares,
    take_cols,
    tanh_elem,
    transpose,
)
from grelu.diffusion import DiffusionConfig, diffuse_features, ppr_exact, ppr_power
from grelu.graph import Graph, karate_club, load_graph, random_split, sym_normalize, synthetic_sbm
from grelu.models import ModelConfig, Propagation, build_model, model_forward, sgc_forward
from grelu.training import (
    TrainConfig,
    k_sweep,
    regularized_loss,
    run_protocol,
    runtime_bench,
    train_one,
)

from conftest import random_graph

RESULTS: dict[int, tuple[str, str, str]] = {}

GRELU_A = ModelConfig(activation=ActivationSpec("grelu"))
SBM_PROTOCOL = TrainConfig(epochs=200, per_class=20, test_size=20)
GRAD_TOL = 1e-4
POINTS = 10


def criterion(num: int, title: str):
    """Record PASS/FAIL/SKIP for criterion ``num`` while letting pytest see the outcome."""

    def wrap(fn):
        def run():
            note = {}
            try:
                fn(note=note)
            except pytest.skip.Exception as e:
                RESULTS[num] = ("SKIP", title, str(e))
                raise
            except BaseException as e:
                RESULTS[num] = ("FAIL", title, f"{note.get('detail', '')} {type(e).__name__}: {e}".strip())
                raise
            RESULTS[num] = ("PASS", title, note.get("detail", ""))

        run.__name__, run.__doc__ = fn.__name__, fn.__doc__
        return run

    return wrap


def sbm_fixture():
    return synthetic_sbm(4, 25, 0.3, 0.02, 16, seed=0)


def contraction(rng, shape):
    """Fixed random linear read-out so every output entry reaches the loss."""
    r = rng.standard_normal(shape)
    return lambda y: sum_all(mul(y, Tensor(r)))


def away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


# --- 1 ---------------------------------------------------------------------------------


def unary_cases(rng):
    """(name, input shape, op) for every single-input differentiable operation."""
    a_sp = SparseMatrix.from_dense(np.where(rng.random((6, 5)) < 0.4, rng.standard_normal((6, 5)), 0.0))
    g = random_graph(rng, 7, p=0.4, feat_dim=3)
    adj = sym_normalize(g, False)
    other = Tensor(rng.standard_normal((4, 3)))
    right = Tensor(rng.standard_normal((3, 2)))
    col = Tensor(rng.standard_normal((4, 1)))
    cfg = DiffusionConfig.oracle(0.2)
    gamma = Tensor(rng.uniform(0.5, 2, (4, 1)))
    exact = DiffusionConfig(teleport=0.2, mode="exact")
    return [
        ("add", (4, 3), lambda t: add(t, other)),
        ("add broadcast", (4, 3), lambda t: add(col, t)),
        ("sub", (4, 3), lambda t: sub(other, t)),
        ("mul", (4, 3), lambda t: mul(t, t)),
        ("scale", (4, 3), lambda t: scale(t, -2.5)),
        ("tanh", (4, 3), tanh_elem),
        ("exp", (4, 3), exp_elem),
        ("relu", (4, 3), relu),
        ("transpose", (4, 3), transpose),
        ("concat", (4, 3), lambda t: concat_cols(t, mul(t, t))),
        ("take_cols", (4, 3), lambda t: take_cols(t, 1, 3)),
        ("row_mean", (4, 3), row_mean),
        ("softmax_rows", (4, 3), lambda t: softmax_rows(t, 2.0)),
        ("softmax_cols", (4, 3), lambda t: softmax_cols(t, 4.0)),
        ("matmul left", (4, 3), lambda t: matmul(t, right)),
        ("matmul right", (3, 2), lambda t: matmul(other, t)),
        ("spmm", (5, 2), lambda t: spmm(a_sp, t)),
        ("ppr_power", (7, 3), lambda t: ppr_power(adj, t, cfg)),
        ("diffusion exact", (7, 3), lambda t: diffuse_features(t, exact, adj)),
        ("elu", (4, 3), elu),
        ("kmax", (4, 3), lambda t: kmax_affine(t, [Tensor([[0.1, -0.3, 0.5]]), Tensor([[1.2]])],
                                               [Tensor([[0.0]]), Tensor([[0.0]])])),
        ("kmax scaled", (4, 3), lambda t: kmax_affine(t, [Tensor([[0.0]]), Tensor([[1.0]])],
                                                      scale=gamma)),
        ("nll", (4, 3), lambda t: nll_loss(t, np.array([0, 2, 1, 2]), np.array([0, 1, 3]))),
        ("sum_squares", (4, 3), sum_squares),
    ]


def check_all_ops():
    """Worst relative error over every operation, plus the per-operation maxima."""
    rng = np.random.default_rng(7)
    worst = {}
    for name, shape, op in unary_cases(rng):
        out_shape = op(Tensor(np.ones(shape))).shape
        read = contraction(rng, out_shape)
        for _ in range(POINTS):
            # zero is the only kink of relu and elu; the kmax cases have margins checked below
            x = away_from_zero(rng, shape)
            if name == "kmax":
                while kink_margin(x, [np.array([[0.1, -0.3, 0.5]]), np.array([[1.2]])]) < 1e-3:
                    x = away_from_zero(rng, shape)
            err = finite_diff_check(lambda t: read(op(t)), x)
            worst[name] = max(worst.get(name, 0.0), err)
    for name, err in parametric_activation_errors(rng).items():
        worst[name] = err
    node_bias_invariance(rng)
    return worst


def parametric_activation_errors(rng):
    """Input and parameter gradients of the learnable activations."""
    worst = {}
    ctx = GraphContext.of(random_graph(rng, 6, p=0.5, feat_dim=3))
    for kind in ("leaky", "prelu", "maxout", "grelu"):
        act = build_activation(ActivationSpec(kind), 3)
        for t in act.parameters():
            t.data = rng.uniform(-1.0, 1.0, t.shape)
        read = contraction(rng, (6, 3))
        err = 0.0
        for _ in range(POINTS):
            x = kink_free_input(rng, act, ctx)
            err = max(err, finite_diff_check(lambda t: read(act(t, ctx)), x))
            params = checked_parameters(act)
            if params:
                xt = Tensor(x)
                err = max(err, gradient_check(lambda: read(act(xt, ctx)), params))
        worst[kind] = err
    return worst


def checked_parameters(act):
    """Parameters for the finite-difference check.

    The node bias shifts every softmax logit equally, so its gradient is
    exactly zero and central differences would only measure rounding noise.
    It is checked through that invariance instead.
    """
    if not hasattr(act, "unit"):
        return act.parameters()
    return [p for p in act.parameters() if p is not act.unit.weights.node_b]


def node_bias_invariance(rng):
    g = random_graph(rng, 6, p=0.5, feat_dim=3)
    cfg = GReluConfig()
    w = HyperWeights.random(cfg, 3, 3, rng)
    x = Tensor(rng.standard_normal((6, 3)))
    y = grelu_forward(x, cfg, w, g).data
    w.node_b.data = w.node_b.data + 3.0
    np.testing.assert_allclose(grelu_forward(x, cfg, w, g).data, y, rtol=1e-12, atol=1e-14)
    read = contraction(rng, (6, 3))
    grad = backward(read(grelu_forward(x, cfg, w, g)))[w.node_b]
    assert abs(grad[0, 0]) < 1e-12


def kink_free_input(rng, act, ctx, margin=1e-3):
    while True:
        x = away_from_zero(rng, (6, 3))
        if isinstance(act, Maxout):
            m = kink_margin(x, [t.data for t in act.w], [t.data for t in act.b])
        elif isinstance(act, PReLU):
            m = kink_margin(x, [act.alpha.data, np.ones((1, 1))])
        elif hasattr(act, "unit"):
            a, b, _ = hyperfunction(Tensor(x), act.unit.cfg, act.unit.weights, ctx)
            m = kink_margin(x, [t.data for t in a], [t.data for t in b])
        else:
            m = np.min(np.abs(x))
        if m > margin:
            return x


def composed_margin(model, g, prop):
    """Smallest kink margin of the hidden GReLU at the current weights (dropout off)."""
    model_forward(model, prop)
    act = model.layers[0].activation
    z = spmm(prop.gcn_adj, matmul(g.features, model.layers[0].weight)).data
    a, b = act.last_params.composed()
    return kink_margin(z, list(a), list(b))


def end_to_end_error(rng):
    """Loss gradient of a 2-layer GCN+GReLU-A over weights, hyper weights and features."""
    base = sbm_fixture()
    x = Tensor(base.features.data.copy(), requires_grad=True)
    g = Graph(base.adjacency, x, base.labels, base.num_classes, base.name)
    prop = Propagation.of(g, True)
    assert prop.sparse_features is None
    split = random_split(g, 0, 20, 20)
    worst = 0.0
    for i in range(POINTS):
        while True:
            model = build_model(replace(GRELU_A, dropout=0.0), 16, 4, seed=int(rng.integers(1 << 30)))
            unit = model.layers[0].activation.unit
            unit.weights = HyperWeights.random(unit.cfg, 16, 16, rng)
            if composed_margin(model, g, prop) > 1e-3:
                break
        params = model.parameters() + [x]

        def loss():
            return regularized_loss(model, model_forward(model, prop), g.labels, split.train, TrainConfig().weight_decay)

        worst = max(worst, gradient_check(loss, params))
    return worst


@criterion(1, "gradient suite")
def test_criterion_1_gradient_suite(note):
    t0 = time.perf_counter()
    per_op = check_all_ops()
    per_op["end-to-end GCN+GReLU-A"] = end_to_end_error(np.random.default_rng(11))
    elapsed = time.perf_counter() - t0
    name, worst = max(per_op.items(), key=lambda kv: kv[1])
    note["detail"] = f"{len(per_op)} checks, worst {worst:.1e} ({name}), {elapsed:.1f} s"
    bad = {k: v for k, v in per_op.items() if v >= GRAD_TOL}
    assert not bad, bad
    assert elapsed < 60.0


# --- 2 ---------------------------------------------------------------------------------


@criterion(2, "diffusion oracle")
def test_criterion_2_diffusion_oracle(note):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(20):
        n = int(rng.integers(2, 65))
        a = float([0.1, 0.15, 0.5, 1.0][i % 4])
        g = synthetic_sbm(int(rng.integers(1, 4)), max(1, n // 3), 0.3, 0.05, 4, seed=i)
        adj = sym_normalize(g, False)
        x = rng.standard_normal((g.n, 4))
        got = ppr_power(adj, Tensor(x), DiffusionConfig.oracle(a)).data
        want = ppr_exact(adj, a) @ x
        worst = max(worst, np.abs(got - want).max() / np.abs(want).max())
    elapsed = time.perf_counter() - t0
    note["detail"] = f"worst relative inf-norm {worst:.1e}, {elapsed:.2f} s"
    assert worst < 1e-6
    assert elapsed < 10.0


# --- 3 ---------------------------------------------------------------------------------


@criterion(3, "reduction identities")
def test_criterion_3_reductions(note):
    rng = np.random.default_rng(3)
    g = sbm_fixture()
    ctx = GraphContext.of(g)
    for _ in range(20):
        x = rng.standard_normal((g.n, 6)) * 3
        x[rng.random(x.shape) < 0.1] = 0.0
        want = np.maximum(x, 0.0)
        for cfg in (make_variant("A"), make_variant("B"), make_variant("E"), make_variant("F"),
                    GReluConfig(K=4)):
            w = HyperWeights.relu_init(cfg, 6, 6)
            np.testing.assert_array_equal(grelu_forward(Tensor(x), cfg, w, ctx).data, want)
        np.testing.assert_array_equal(PReLU(6, init=0.0)(Tensor(x)).data, want)
        np.testing.assert_array_equal(Maxout(6, init=(1.0, 0.0, 0.0, 0.0))(Tensor(x)).data, want)

    # K=1: y(x1 + x2) + y(0) = y(x1) + y(x2) with the hyperfunction input held fixed
    cfg = make_variant("C", input_source="raw_features")
    w = HyperWeights.random(cfg, 16, 6, rng, scale=0.8)
    f = lambda z: grelu_forward(Tensor(z), cfg, w, ctx).data
    x1, x2 = rng.standard_normal((g.n, 6)), rng.standard_normal((g.n, 6))
    np.testing.assert_allclose(f(x1 + x2) + f(np.zeros_like(x1)), f(x1) + f(x2), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(f(2.5 * x1) - f(np.zeros_like(x1)), 2.5 * (f(x1) - f(np.zeros_like(x1))),
                               rtol=1e-12, atol=1e-12)

    worst = 0.0
    for seed in range(5):
        gcn = build_model(ModelConfig(activation=ActivationSpec("identity"), dropout=0.0), 16, 4, seed=seed)
        theta = Tensor(gcn.layers[0].weight.data @ gcn.layers[1].weight.data)
        diff = np.abs(model_forward(gcn, g).data - sgc_forward(g, 2, theta).data).max()
        worst = max(worst, diff)
    note["detail"] = f"SGC vs collapsed GCN max diff {worst:.1e}"
    assert worst < 1e-9


# --- 4 ---------------------------------------------------------------------------------


def triple_loop(alpha_c, beta_c, gamma):
    K, C = alpha_c.shape
    N = gamma.shape[0]
    a = np.zeros((K, N, C))
    b = np.zeros((K, N, C))
    for k in range(K):
        for n in range(N):
            for c in range(C):
                a[k, n, c] = gamma[n, 0] * alpha_c[k, c]
                b[k, n, c] = gamma[n, 0] * beta_c[k, c]
    return a, b


@criterion(4, "factorization")
def test_criterion_4_factorization(note):
    rng = np.random.default_rng(4)
    for _ in range(50):
        K, C, N = int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 17))
        g = random_graph(rng, N, p=0.3, feat_dim=C)
        cfg = GReluConfig(K=K)
        w = HyperWeights.random(cfg, C, C, rng)
        a, b, snap = hyperfunction(Tensor(rng.standard_normal((N, C))), cfg, w, GraphContext.of(g))
        want_a, want_b = triple_loop(snap.alpha_c, snap.beta_c, snap.gamma)
        np.testing.assert_array_equal(np.stack([t.data for t in a]), want_a)
        np.testing.assert_array_equal(np.stack([t.data for t in b]), want_b)
        np.testing.assert_array_equal(snap.composed()[0], want_a)
        assert snap.factor_count() == 2 * K * (C + N)

    g = sbm_fixture()
    K, hidden = 2, 16
    model = build_model(replace(GRELU_A, hidden=hidden), 16, 4, seed=0)
    weights = sum(l.weight.data.size for l in model.layers)
    hyper = model.layers[0].activation.unit.weights.count()
    # channel map, channel bias, node map, node bias; none of them grows with N
    assert hyper == hidden * 2 * K * hidden + 2 * K * hidden + hidden + 1
    assert sum(p.data.size for p in model.parameters()) == weights + hyper
    model_forward(model, g)
    snap = model.layers[0].activation.last_params
    assert snap.factor_count() == 2 * K * (hidden + g.n)
    note["detail"] = (f"composed factors {snap.factor_count()} = 2K(C+N) vs {2 * K * hidden * g.n} free; "
                      f"learnables {weights} weights + {hyper} hyperfunction")


# --- 5 ---------------------------------------------------------------------------------


@criterion(5, "learnability fixture")
def test_criterion_5_learnability(note):
    t0 = time.perf_counter()
    res = run_protocol(GRELU_A, sbm_fixture(), SBM_PROTOCOL, n_runs=10, seed=0)
    train = float(np.mean([r.final_train_acc for r in res.runs]))
    k = karate_club()
    split = random_split(k, 0, per_class=4, test_size=20)
    kres = train_one(build_model(GRELU_A, 34, 2, 0), k, split, TrainConfig(per_class=4, test_size=20), 0)
    elapsed = time.perf_counter() - t0
    note["detail"] = (f"SBM test {res.mean:.3f} train {train:.3f}, karate train {kres.final_train_acc:.3f}, "
                      f"{elapsed:.1f} s")
    assert res.mean > 0.85
    assert train > 0.99
    assert kres.final_train_acc == 1.0
    assert elapsed < 120.0


# --- 6 ---------------------------------------------------------------------------------


@criterion(6, "relative ordering on Cora")
def test_criterion_6_cora(note):
    path = os.environ.get("GRELU_CORA_DIR", "")
    if not path or not os.path.isdir(path):
        warnings.warn("Cora not found; set GRELU_CORA_DIR to a directory in the TSV graph format")
        pytest.skip("Cora dataset absent (set GRELU_CORA_DIR)")
    g = load_graph(path)
    cfg = TrainConfig()
    t0 = time.perf_counter()
    relu_res = run_protocol(ModelConfig(), g, cfg, n_runs=10, seed=0)
    grelu_res = run_protocol(GRELU_A, g, cfg, n_runs=10, seed=0)
    gap = grelu_res.mean - relu_res.mean
    note["detail"] = (f"ReLU {relu_res.mean:.4f}, GReLU-A {grelu_res.mean:.4f}, gap {100 * gap:+.2f} points, "
                      f"{time.perf_counter() - t0:.0f} s")
    if gap <= 0:
        warnings.warn(f"GReLU-A does not beat ReLU on Cora (gap {100 * gap:+.2f} points)")
    assert relu_res.mean >= 0.75
    assert grelu_res.mean >= relu_res.mean - 0.005
    assert time.perf_counter() - t0 < 15 * 60


# --- 7 ---------------------------------------------------------------------------------


@criterion(7, "ablation ordering A vs D")
def test_criterion_7_ablation(note):
    g = sbm_fixture()
    a = run_protocol(GRELU_A, g, SBM_PROTOCOL, n_runs=10, seed=0)
    d = run_protocol(replace(GRELU_A, activation=ActivationSpec("grelu", grelu=make_variant("D"))), g,
                     SBM_PROTOCOL, n_runs=10, seed=0)
    gap = a.mean - d.mean
    note["detail"] = f"A {a.mean:.3f}, D {d.mean:.3f}, gap {100 * gap:+.1f} points"
    if gap < 0:
        warnings.warn(f"GReLU-A trails GReLU-D by {-100 * gap:.1f} points")
    assert a.mean >= d.mean - 0.005


# --- 8 ---------------------------------------------------------------------------------


@criterion(8, "K sweep stability")
def test_criterion_8_k_sweep(note):
    rows = k_sweep(GRELU_A, sbm_fixture(), SBM_PROTOCOL, ks=range(2, 8), n_runs=10, seed=0)
    means = [r["mean"] for r in rows]
    spread = max(means) - min(means)
    note["detail"] = "means " + " ".join(f"K{r['k']}={r['mean']:.3f}" for r in rows) + f", spread {spread:.3f}"
    assert [r["k"] for r in rows] == [2, 3, 4, 5, 6, 7]
    assert spread < 0.05


# --- 9 ---------------------------------------------------------------------------------


def citeseer_scale_graph(seed=0):
    """3330 nodes in 6 classes, about 4.6k edges, 3703 sparse binary features."""
    g = synthetic_sbm(6, 555, 0.0042, 0.00017, 6, seed=seed)
    rng = np.random.default_rng(seed)
    d = 3703
    topic = rng.integers(0, d, size=(6, 400))
    x = np.zeros((g.n, d))
    for i in range(g.n):
        # 16 topic words of the node's class plus 16 background words
        x[i, np.concatenate([rng.choice(topic[g.labels[i]], 16), rng.integers(0, d, 16)])] = 1.0
    return Graph(g.adjacency, Tensor(x), g.labels, g.num_classes, "citeseer-scale")


@criterion(9, "runtime bound")
def test_criterion_9_runtime(note):
    g = citeseer_scale_graph()
    rows = runtime_bench(GRELU_A, g, TrainConfig(epochs=200), activations=("relu", "maxout", "grelu"),
                         repeats=3)
    t = {r["activation"]: r["seconds"] for r in rows}
    vs_relu, vs_maxout = t["grelu"] / t["relu"], t["grelu"] / t["maxout"]
    note["detail"] = (f"200 epochs: ReLU {t['relu']:.2f} s, Maxout {t['maxout']:.2f} s, GReLU {t['grelu']:.2f} s; "
                      f"GReLU/ReLU {vs_relu:.2f} (bound 2), GReLU/Maxout {vs_maxout:.2f} (bound 1.25)")
    assert vs_relu <= 2.0
    assert vs_maxout <= 1.25


# --- 10 --------------------------------------------------------------------------------


@criterion(10, "determinism and equivariance")
def test_criterion_10_determinism_equivariance(note):
    g = sbm_fixture()
    cfg = replace(SBM_PROTOCOL, epochs=50)
    first = run_protocol(GRELU_A, g, cfg, n_runs=3, seed=4)
    again = run_protocol(GRELU_A, g, cfg, n_runs=3, seed=4)
    assert [r.final_test_acc for r in first.runs] == [r.final_test_acc for r in again.runs]
    assert [r.final_train_acc for r in first.runs] == [r.final_train_acc for r in again.runs]
    for a, b in zip(first.runs, again.runs):
        np.testing.assert_array_equal(a.loss_curve, b.loss_curve)

    rng = np.random.default_rng(10)
    perm = rng.permutation(g.n)
    h = g.permuted(perm)
    worst = 0.0
    for backbone in ("gcn", "mp", "sgc", "appnp"):
        for act in ("relu", "grelu"):
            m = build_model(ModelConfig(backbone=backbone, activation=ActivationSpec(act)), 16, 4, seed=2)
            for a in m.activations():
                for t in a.parameters():
                    t.data = 0.5 * rng.standard_normal(t.shape)
            y = model_forward(m, g).data
            worst = max(worst, np.abs(model_forward(m, h).data - y[perm]).max())
    for tag in "ABCDEFG":
        cfg_g = make_variant(tag)
        w = HyperWeights.random(cfg_g, 6, 6, rng)
        x = rng.standard_normal((g.n, 6))
        y = grelu_forward(Tensor(x), cfg_g, w, g).data
        worst = max(worst, np.abs(grelu_forward(Tensor(x[perm]), cfg_g, w, h).data - y[perm]).max())
    note["detail"] = f"bit-identical reruns, worst permutation error {worst:.1e}"
    assert worst < 1e-9

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadtrack.nets import (
    LOG_STD_MAX, LOG_STD_MIN, AdamState, CheckpointError, GaussianHead, MlpNet, NetError, adam_step,
    clip_grad_norm, gaussian_log_density, grad_check, load_checkpoint, save_checkpoint,
)

from oracles import gauss_logpdf_loops


def random_net(rng, dims=None, act=None):
    dims = dims or [int(rng.integers(1, 6)) for _ in range(int(rng.integers(2, 5)))]
    act = act or ("tanh", "elu")[int(rng.integers(2))]
    net = MlpNet(dims, act)
    net.params = rng.normal(0, 0.7, net.param_count)
    return net


def test_param_count():
    net = MlpNet([3, 5, 2])
    assert net.param_count == 4 * 5 + 6 * 2
    with pytest.raises(NetError):
        MlpNet([3])
    with pytest.raises(NetError):
        MlpNet([3, 2], "relu")
    with pytest.raises(NetError):
        MlpNet([3, 2], params=np.zeros(3))


def test_forward_examples(rng):
    assert np.all(MlpNet([4, 8, 3], "tanh")(rng.normal(size=(5, 4))) == 0)
    lin = MlpNet([3, 3], "identity")
    w, b = lin.layers()[0]
    w[...] = np.eye(3)
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(lin(x), x)
    net = random_net(rng, [4, 6, 2])
    np.testing.assert_array_equal(net(x[:, :1].repeat(4, 1)), net(x[:, :1].repeat(4, 1)))
    with pytest.raises(NetError):
        net.forward(np.zeros((2, 5)))


def test_linear_layer_gradients_by_hand(rng):
    net = MlpNet([3, 2], "identity", rng.normal(size=8))
    x = rng.normal(size=(1, 3))
    _, tape = net.forward(x)
    g, gx = net.backward(tape, np.ones((1, 2)))
    (gw, gb), = net.layers(g)
    np.testing.assert_array_equal(gb, [1.0, 1.0])
    np.testing.assert_array_equal(gw, np.repeat(x.T, 2, axis=1))
    w, _ = net.layers()[0]
    np.testing.assert_allclose(gx, w.sum(axis=1)[None], atol=1e-15)


def test_zero_output_gradient_gives_zero(rng):
    net = random_net(rng, [4, 5, 3])
    _, tape = net.forward(rng.normal(size=(6, 4)))
    g, gx = net.backward(tape, np.zeros((6, 3)))
    assert not g.any() and not gx.any()


def test_tape_single_use_and_shape_checks(rng):
    net = random_net(rng, [2, 3, 1])
    _, tape = net.forward(np.ones((2, 2)))
    with pytest.raises(NetError):
        net.backward(tape, np.ones((3, 1)))
    net.backward(tape, np.ones((2, 1)))
    with pytest.raises(NetError, match="consumed"):
        net.backward(tape, np.ones((2, 1)))


def test_gradient_check_random_nets(rng):
    worst = 0.0
    for _ in range(100):
        net = random_net(rng)
        x = rng.normal(size=(int(rng.integers(1, 5)), net.layer_dims[0]))
        w = rng.normal(size=(len(x), net.layer_dims[-1]))

        def f(p):
            return float(np.sum(w * MlpNet(net.layer_dims, net.activation, p)(x)))

        _, tape = net.forward(x)
        g, gx = net.backward(tape, w)
        worst = max(worst, grad_check(f, g, net.params, rng))
        worst = max(worst, grad_check(lambda xx: float(np.sum(w * net(xx))), gx, x, rng))
    assert worst < 1e-4


def test_gradients_independent_of_batch_partition(rng):
    net = random_net(rng, [5, 7, 7, 3], "elu")
    x = rng.normal(size=(12, 5))
    w = rng.normal(size=(12, 3))
    _, tape = net.forward(x)
    full, _ = net.backward(tape, w)
    parts = np.zeros_like(full)
    for idx in np.array_split(np.arange(12), 4):
        _, t = net.forward(x[idx])
        parts += net.backward(t, w[idx])[0]
    np.testing.assert_allclose(parts, full, atol=1e-10)


def test_adam_examples(rng):
    p = rng.normal(size=5)
    st_ = AdamState.for_params(5, 1e-3)
    out = adam_step(st_, p, np.zeros(5))
    np.testing.assert_array_equal(out, p)
    assert st_.step == 1
    g = rng.normal(size=5)
    st_ = AdamState.for_params(5, 1e-3)
    upd = adam_step(st_, p, g) - p
    # first step: m_hat = g, v_hat = g^2, so the update is -lr * g / (|g| + eps)
    np.testing.assert_allclose(upd, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert np.all(np.abs(upd) <= 1e-3 * (1 + 1e-8))
    zero = AdamState.for_params(5, 0.0)
    q = p
    for _ in range(5):
        q = adam_step(zero, q, rng.normal(size=5))
    np.testing.assert_array_equal(q, p)


def test_adam_deterministic_and_errors(rng):
    g = rng.normal(size=(20, 4))

    def traj():
        st_ = AdamState.for_params(4, 0.01)
        p = np.ones(4)
        out = []
        for gi in g:
            p = adam_step(st_, p, gi)
            out.append(p)
        return np.array(out)

    np.testing.assert_array_equal(traj(), traj())
    with pytest.raises(NetError):
        adam_step(AdamState.for_params(4, 0.1), np.ones(4), np.ones(3))
    with pytest.raises(NetError):
        adam_step(AdamState.for_params(4, 0.1), np.ones(4), np.array([1, np.nan, 0, 0]))


def test_adam_weight_decay_is_decoupled():
    st_ = AdamState.for_params(1, 0.1, weight_decay=0.5)
    out = adam_step(st_, np.array([2.0]), np.array([0.0]))
    np.testing.assert_allclose(out, [2.0 - 0.1 * 0.5 * 2.0])


def test_clip_grad_norm():
    g, n = clip_grad_norm(np.array([3.0, 4.0]), 1.0)
    assert n == 5.0
    np.testing.assert_allclose(g, [0.6, 0.8])
    g, _ = clip_grad_norm(np.array([0.3, 0.4]), 1.0)
    np.testing.assert_array_equal(g, [0.3, 0.4])


def test_gaussian_examples(rng):
    h = GaussianHead(np.zeros((1, 1)), np.zeros(1))
    assert h.log_prob(np.zeros((1, 1)))[0] == pytest.approx(-0.9189385332046727, abs=1e-15)
    tight = GaussianHead(np.full((1000, 3), 2.0), np.full(3, -50.0))
    s = tight.sample(np.random.default_rng(3))
    # the clamp floor bounds the spread; 6 sigma is never exceeded in practice
    assert np.all(np.abs(s - 2.0) <= 6 * np.exp(LOG_STD_MIN))
    np.testing.assert_array_equal(s, tight.sample(np.random.default_rng(3)))
    assert np.all(tight.log_std == LOG_STD_MIN)
    assert np.all(GaussianHead(np.zeros(2), np.full(2, 9.0)).log_std == LOG_STD_MAX)
    with pytest.raises(NetError):
        GaussianHead.from_output(np.zeros((1, 3)))
    head = GaussianHead.from_output(np.array([[1.0, 2.0, -0.5, 0.1]]))
    np.testing.assert_array_equal(head.mean, [[1.0, 2.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gaussian_density_matches_loops(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 6))
    x, mu, ls = rng.normal(size=d), rng.normal(size=d), rng.uniform(-1, 1, d)
    assert gaussian_log_density(x, mu, ls) == pytest.approx(gauss_logpdf_loops(x, mu, np.exp(ls)), abs=1e-10)


def test_log_prob_gradients(rng):
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 5))
        mu, ls, x = rng.normal(size=(2, d)), rng.uniform(-2, 1, d), rng.normal(size=(2, d))
        gm, gl = GaussianHead(mu, ls).log_prob_grads(x)
        worst = max(worst, grad_check(lambda m: float(GaussianHead(m, ls).log_prob(x).sum()), gm, mu, rng))
        worst = max(worst, grad_check(lambda s: float(GaussianHead(mu, s).log_prob(x).sum()), gl.sum(axis=0), ls,
                                      rng))
    assert worst < 1e-5
    # clamped log-std passes no gradient
    _, gl = GaussianHead(np.zeros((1, 2)), np.array([-7.0, 0.0])).log_prob_grads(np.full((1, 2), 2.0))
    assert gl[0, 0] == 0 and gl[0, 1] != 0


def test_checkpoint_round_trip(tmp_path, rng):
    net = random_net(rng, [3, 4, 2], "elu")
    opt = AdamState.for_params(net.param_count, 1e-3, weight_decay=0.01)
    net.params = adam_step(opt, net.params, rng.normal(size=net.param_count))
    vec = rng.normal(size=7)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, {"net": (net, opt), "vec": vec})
    back = load_checkpoint(path)
    n2, o2 = back["net"]
    assert n2.layer_dims == net.layer_dims and n2.activation == "elu"
    np.testing.assert_array_equal(n2.params, net.params)
    assert o2.step == 1 and o2.lr == 1e-3 and o2.weight_decay == 0.01
    np.testing.assert_array_equal(o2.m, opt.m)
    np.testing.assert_array_equal(o2.v, opt.v)
    np.testing.assert_array_equal(back["vec"][0], vec)
    assert back["vec"][1] is None
    path2 = tmp_path / "b.ckpt"
    save_checkpoint(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_layout_and_errors(tmp_path):
    net = MlpNet([1, 1], "identity", np.array([2.0, 3.0]))
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"n": net})
    raw = path.read_bytes()
    assert raw[:8] == b"QTCKPT\x00\x01"
    assert raw[-17:-1] == np.array([2.0, 3.0], dtype="<f8").tobytes()
    (tmp_path / "bad").write_bytes(b"nope" * 4)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "long")

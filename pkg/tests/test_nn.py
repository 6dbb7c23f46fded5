import numpy as np
import pytest

from fbsdekit.exceptions import EvaluationFailure, NonFiniteGradient
from fbsdekit.nn import (
    Architecture,
    Network,
    adam_init,
    adam_step,
    apply_with_jacobian,
    default_architecture,
    grad_params,
    init_glorot,
    input_jacobian,
    layer_norm,
    load_network,
    make_lr_schedule,
    save_network,
)
from fbsdekit.nn import autodiff as ad
from fbsdekit.nn.autodiff import Tensor
from helpers import central_jac, param_gradcheck


def small_arch(d_in=2, out_kind="row", out_dim=2, widths=(6, 5), ln=True):
    return Architecture(input_dim=d_in, widths=widths, out_kind=out_kind,
                        out_dim=out_dim, layer_norm=ln)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

class TestGlorotInit:
    def test_biases_zero_gains_one(self):
        net = init_glorot(small_arch(), seed=0)
        # parameter order: W0 b0 g0 o0 W1 b1 Wout bout
        assert np.all(net.params[1].data == 0.0)
        assert np.all(net.params[3].data == 0.0)  # offset
        assert np.all(net.params[2].data == 1.0)  # gain
        assert np.all(net.params[5].data == 0.0)
        assert np.all(net.params[7].data == 0.0)

    def test_weight_variance(self):
        arch = Architecture(input_dim=256, widths=(256,), out_kind="scalar",
                            out_dim=1, layer_norm=False)
        net = init_glorot(arch, seed=4)
        W = net.params[0].data
        assert W.shape == (256, 256)
        target = 2.0 / (256 + 256)
        assert np.var(W) == pytest.approx(target, rel=0.10)
        a = np.sqrt(6.0 / 512)
        assert np.max(np.abs(W)) <= a

    def test_determinism(self):
        a = init_glorot(small_arch(), seed=9)
        b = init_glorot(small_arch(), seed=9)
        for p, q in zip(a.params, b.params):
            assert np.array_equal(p.data, q.data)

    def test_default_architecture_widths(self):
        arch = default_architecture(3, "row")
        assert arch.widths == (103, 103)
        assert arch.depth == 2

    def test_invalid_architecture(self):
        with pytest.raises(ValueError):
            Architecture(input_dim=1, widths=(), out_kind="scalar")
        with pytest.raises(ValueError):
            Architecture(input_dim=1, widths=(4,), out_kind="banana")


# ---------------------------------------------------------------------------
# forward evaluation
# ---------------------------------------------------------------------------

class TestForward:
    def test_zero_weights_give_output_bias(self):
        net = init_glorot(small_arch(out_kind="scalar", out_dim=1), seed=0)
        for p in net.params:
            p.data[...] = 0.0
        net.params[2].data[...] = 1.0  # keep the norm gain at one
        net.params[-1].data[...] = 0.75
        out = net(np.zeros((3, 2)))
        assert np.allclose(out, 0.75)

    def test_single_unit_is_tanh(self):
        arch = Architecture(input_dim=1, widths=(1,), out_kind="scalar",
                            out_dim=1, layer_norm=False)
        net = init_glorot(arch, seed=0)
        net.params[0].data[...] = 1.0
        net.params[1].data[...] = 0.0
        net.params[2].data[...] = 1.0
        net.params[3].data[...] = 0.0
        x = np.linspace(-2, 2, 7)[:, None]
        assert np.allclose(net(x), np.tanh(x[:, 0]))

    def test_layer_norm_constant_vector_hits_eps_floor(self):
        # constant normalized axis: variance 0, epsilon keeps it finite and
        # the standardized value collapses to the offset
        h = np.full((4, 6), 3.21)
        out = layer_norm(h, np.ones(6), np.full(6, 0.5), eps=1e-6)
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, 0.5)

    def test_layer_norm_shift_invariance(self):
        rng = np.random.default_rng(0)
        h = rng.normal(size=(5, 8))
        assert np.var(h, axis=-1).min() > 10 * 1e-6
        base = layer_norm(h, np.ones(8), np.zeros(8)).data
        shifted = layer_norm(h + 17.3, np.ones(8), np.zeros(8)).data
        assert np.allclose(base, shifted, atol=1e-9)

    def test_norm_order_switch_changes_output(self):
        a1 = small_arch()
        a2 = Architecture(input_dim=2, widths=(6, 5), out_kind="row",
                          out_dim=2, norm_before_activation=True)
        n1 = init_glorot(a1, seed=7)
        n2 = Network(a2, [ad.parameter(p.data) for p in n1.params])
        x = np.random.default_rng(1).normal(size=(3, 2))
        assert not np.allclose(n1(x), n2(x))

    def test_nonfinite_output_raises(self):
        net = init_glorot(small_arch(out_kind="scalar"), seed=0)
        net.params[-2].data[...] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(EvaluationFailure):
            net(np.ones((2, 2)))

    def test_output_shapes(self):
        x = np.zeros((4, 3))
        for kind, shape in (("scalar", (4,)), ("row", (4, 3)),
                            ("matrix", (4, 3, 3))):
            net = init_glorot(small_arch(d_in=3, out_kind=kind, out_dim=3), 0)
            assert net(x).shape == shape


# ---------------------------------------------------------------------------
# jacobians
# ---------------------------------------------------------------------------

class TestInputJacobian:
    def test_constant_network_zero_jacobian(self):
        net = init_glorot(small_arch(), seed=1)
        net.params[0].data[...] = 0.0  # kill the input path
        jac = input_jacobian(net, np.ones((3, 2)))
        assert np.allclose(jac, 0.0)

    def test_scalar_tanh_analytic(self):
        arch = Architecture(input_dim=1, widths=(1,), out_kind="scalar",
                            out_dim=1, layer_norm=False)
        net = init_glorot(arch, seed=0)
        net.params[0].data[...] = 2.0
        net.params[1].data[...] = 0.0
        net.params[2].data[...] = 1.0
        net.params[3].data[...] = 0.0
        jac = input_jacobian(net, np.array([0.3]))
        assert jac[0, 0] == pytest.approx(2 * (1 - np.tanh(0.6) ** 2), rel=1e-12)
        assert jac[0, 0] == pytest.approx(1.42316, abs=1e-5)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = init_glorot(small_arch(d_in=3, out_dim=3, widths=(7, 6)), seed)
        x = rng.normal(size=(4, 3))
        jac = input_jacobian(net, x)
        fd = np.zeros_like(jac)
        h = 1e-5
        for j in range(3):
            xp = x.copy(); xp[:, j] += h
            xm = x.copy(); xm[:, j] -= h
            fd[:, :, j] = (net(xp) - net(xm)) / (2 * h)
        scale = max(np.max(np.abs(fd)), 1e-10)
        assert np.max(np.abs(jac - fd)) / scale < 1e-6

    def test_single_point_shape(self):
        net = init_glorot(small_arch(), seed=2)
        assert input_jacobian(net, np.zeros(2)).shape == (2, 2)


# ---------------------------------------------------------------------------
# parameter gradients
# ---------------------------------------------------------------------------

class TestGradParams:
    @pytest.mark.parametrize("seed", range(20))
    def test_squared_output_loss(self, seed):
        rng = np.random.default_rng(seed)
        net = init_glorot(small_arch(out_kind="scalar"), seed)
        x = rng.normal(size=(4, 2))

        def loss_fn():
            out = net.apply(x)
            return ad.mean(out * out)

        assert param_gradcheck(loss_fn, net.params) < 1e-5

    @pytest.mark.parametrize("seed", range(20))
    def test_jacobian_loss_double_backward(self, seed):
        rng = np.random.default_rng(seed)
        net = init_glorot(small_arch(out_dim=2), seed)
        x = rng.normal(size=(3, 2))
        v = rng.normal(size=(3, 2))

        def loss_fn():
            _, jac = apply_with_jacobian(net, x)
            vj = ad.einsum("bi,bij->bj", Tensor(v), jac)
            return ad.mean(ad.tsum(vj * vj, axis=1))

        assert param_gradcheck(loss_fn, net.params) < 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_reverse_over_reverse(self, seed):
        """Gradient of a loss containing a reverse-mode input gradient."""
        rng = np.random.default_rng(seed)
        net = init_glorot(small_arch(out_kind="scalar", widths=(5, 4)), seed)
        x = rng.normal(size=(3, 2))

        def loss_fn():
            xt = Tensor(x, requires_grad=True)
            out = net.apply(xt)
            (gx,) = ad.grad(out, [xt], grad_output=np.ones(3),
                            create_graph=True)
            return ad.mean(ad.tsum(gx * gx, axis=1))

        assert param_gradcheck(loss_fn, net.params) < 1e-5

    def test_zero_gradient_for_unused_network(self):
        net1 = init_glorot(small_arch(out_kind="scalar"), 0)
        net2 = init_glorot(small_arch(out_kind="scalar"), 1)
        x = np.ones((2, 2))
        out = net1.apply(x)
        loss = ad.mean(out * out)
        grads = grad_params(loss, [net1, net2])
        n1 = len(net1.params)
        assert any(np.any(g.data != 0.0) for g in grads[:n1])
        assert all(np.all(g.data == 0.0) for g in grads[n1:])

    def test_rejects_nonscalar_loss(self):
        net = init_glorot(small_arch(), 0)
        with pytest.raises(ValueError):
            grad_params(net.apply(np.ones((2, 2))), net)


# ---------------------------------------------------------------------------
# engine primitives
# ---------------------------------------------------------------------------

class TestAutodiffPrimitives:
    def _gradcheck_expr(self, build, shapes, seed=0, h=1e-6):
        rng = np.random.default_rng(seed)
        leaves = [ad.parameter(rng.normal(size=s) + 2.0) for s in shapes]

        def scalar():
            return build(*leaves)

        loss = scalar()
        grads = ad.grad(loss, leaves)
        for i, leaf in enumerate(leaves):
            fd = np.zeros_like(leaf.data)
            it = np.nditer(leaf.data, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = leaf.data[idx]
                leaf.data[idx] = orig + h
                lp = scalar().item()
                leaf.data[idx] = orig - h
                lm = scalar().item()
                leaf.data[idx] = orig
                fd[idx] = (lp - lm) / (2 * h)
            scale = max(np.max(np.abs(fd)), 1e-10)
            assert np.max(np.abs(grads[i].data - fd)) / scale < 1e-6

    def test_div_exp_sqrt_pow(self):
        self._gradcheck_expr(
            lambda a, b: ad.mean(ad.exp(a / b) + ad.sqrt(a) * b ** 1.5),
            [(3, 2), (3, 2)],
        )

    def test_broadcasting_and_reductions(self):
        self._gradcheck_expr(
            lambda a, b: ad.tsum(a * b + ad.mean(a, axis=0, keepdims=True)),
            [(4, 3), (3,)],
        )

    def test_stack_take_transpose(self):
        def build(a, b):
            s = ad.stack([a, b, a * b], axis=1)          # (2, 3, 3)
            t = ad.transpose(s, (1, 0, 2))               # (3, 2, 3)
            return ad.tsum(ad.take_at(t, 2, 0)) + ad.tsum(t * t)

        self._gradcheck_expr(build, [(2, 3), (2, 3)])

    def test_einsum_contraction(self):
        self._gradcheck_expr(
            lambda a, b, v: ad.tsum(ad.einsum("bij,bj->bi", ad.einsum(
                "bik,kj->bij", a, b), v) ** 2.0),
            [(2, 3, 4), (4, 3), (2, 3)],
        )

    def test_bmm_broadcast(self):
        self._gradcheck_expr(
            lambda a, b: ad.tsum(ad.bmm(a, b) * ad.bmm(a, b)),
            [(5, 4), (2, 4, 3)],
        )

    def test_einsum_rejects_unrecoverable_spec(self):
        a = ad.parameter(np.ones((2, 3)))
        with pytest.raises(ValueError):
            ad.einsum("ij->i", a)  # j appears only in the reduced operand
        with pytest.raises(ValueError):
            ad.einsum("ii->i", a)  # repeated index within one operand

    def test_no_grad_suppresses_graph(self):
        a = ad.parameter(np.ones(3))
        with ad.no_grad():
            out = a * 2.0
        assert not out.requires_grad
        out2 = a * 2.0
        assert out2.requires_grad

    def test_unreachable_input_gets_zero(self):
        a = ad.parameter(np.ones(2))
        b = ad.parameter(np.ones(2))
        loss = ad.tsum(a * a)
        ga, gb = ad.grad(loss, [a, b])
        assert np.allclose(ga.data, 2.0)
        assert np.all(gb.data == 0.0)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class TestAdam:
    def test_zero_gradient_noop(self):
        net = init_glorot(small_arch(), 0)
        before = [p.data.copy() for p in net.params]
        state = adam_init(net.params)
        grads = [Tensor(np.zeros_like(p.data)) for p in net.params]
        adam_step(state, net.params, grads, lr=0.01)
        assert state.step == 1
        for p, b in zip(net.params, before):
            assert np.array_equal(p.data, b)

    def test_first_step_magnitude(self):
        p = ad.parameter(np.array([0.0]))
        state = adam_init([p])
        adam_step(state, [p], [Tensor(np.array([1.0]))], lr=0.01)
        assert p.data[0] == pytest.approx(-0.01, rel=1e-6)

    def test_second_step_not_larger(self):
        p = ad.parameter(np.array([0.0]))
        state = adam_init([p])
        adam_step(state, [p], [Tensor(np.array([1.0]))], lr=0.01)
        d1 = abs(p.data[0])
        prev = p.data[0]
        adam_step(state, [p], [Tensor(np.array([1.0]))], lr=0.01)
        d2 = abs(p.data[0] - prev)
        assert d2 <= d1 * (1 + 1e-6)

    def test_nonfinite_gradient_rejected(self):
        p = ad.parameter(np.array([0.0]))
        state = adam_init([p])
        with pytest.raises(NonFiniteGradient):
            adam_step(state, [p], [Tensor(np.array([np.nan]))], lr=0.01)
        assert state.step == 0
        assert p.data[0] == 0.0

    def test_lr_schedules(self):
        sched = make_lr_schedule("decay3")
        assert sched(0, 100) == 1e-2
        assert sched(50, 100) == 1e-3
        assert sched(90, 100) == 1e-4
        assert make_lr_schedule("constant")(5, 10) == 1e-3
        with pytest.raises(ValueError):
            make_lr_schedule("nope")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class TestCheckpoint:
    def test_roundtrip(self):
        net = init_glorot(small_arch(d_in=3, out_kind="matrix", out_dim=3), 5)
        blob = save_network(net)
        back = load_network(blob)
        assert back.arch == net.arch
        for p, q in zip(net.params, back.params):
            assert np.array_equal(p.data, q.data)
        x = np.random.default_rng(0).normal(size=(2, 3))
        assert np.array_equal(net(x), back(x))

    def test_header_layout(self):
        net = init_glorot(small_arch(), 0)
        blob = save_network(net)
        assert blob[:8] == b"FBNET001"
        n_params = sum(p.data.size for p in net.params)
        assert len(blob) == 8 + 28 + 4 * 2 + 8 * n_params

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            load_network(b"NOTANET!" + b"\x00" * 64)

    def test_truncation_detected(self):
        net = init_glorot(small_arch(), 0)
        blob = save_network(net)
        with pytest.raises(Exception):
            load_network(blob[:-8])

    def test_warm_start_copy(self):
        a = init_glorot(small_arch(), 0)
        b = init_glorot(small_arch(), 1)
        b.load_from(a)
        for p, q in zip(a.params, b.params):
            assert np.array_equal(p.data, q.data)
        # storage stays independent
        a.params[0].data[0, 0] += 1.0
        assert b.params[0].data[0, 0] != a.params[0].data[0, 0]

import numpy as np
import pytest

from rsalab import baselines as bl
from rsalab import gradients as gr
from rsalab import rsa_reference as rr
from rsalab.rsa_efficient import rsa_forward_fast
from rsalab.tensorgrid import NeighborhoodSpec, make_rng


def small_case(seed=0, C=6, L=2, D=2, G_corr=None, window="3x1x1", normalize=True, grid=(1, 3, 3, 3)):
    spec = NeighborhoodSpec.parse(window)
    rng = make_rng(seed)
    p = rr.init_rsa_params(C, spec.M, L=L, D=D, G_corr=G_corr, normalize=normalize, rng=rng)
    x = rng.standard_normal((*grid, C))
    up = rng.standard_normal(x.shape)
    return x, spec, p, up


class TestRsaBackward:
    def test_zero_upstream(self):
        x, spec, p, _ = small_case()
        g = gr.rsa_backward(x, spec, p, np.zeros_like(x))
        assert set(g) == set(p.NAMES) | {"x"}
        assert all(not np.any(v) for v in g.values())

    def test_shapes_mirror_parameters(self):
        x, spec, p, up = small_case()
        g = gr.rsa_backward(x, spec, p, up)
        for k, v in p.arrays().items():
            assert g[k].shape == v.shape
        assert g["x"].shape == x.shape

    def test_linear_in_upstream(self):
        x, spec, p, up = small_case(1)
        up2 = make_rng(99).standard_normal(x.shape)
        a = gr.rsa_backward(x, spec, p, up)
        b = gr.rsa_backward(x, spec, p, up2)
        s = gr.rsa_backward(x, spec, p, up + up2)
        for k in s:
            assert np.max(np.abs(s[k] - a[k] - b[k])) <= 1e-12 * max(1.0, np.max(np.abs(s[k])))

    def test_vjp_forward_value(self):
        x, spec, p, _ = small_case(2)
        y, _ = gr.rsa_vjp(x, spec, p)
        assert np.max(np.abs(y - rr.rsa_forward_reference(x, spec, p))) <= 1e-12

    def test_upstream_shape_mismatch(self):
        x, spec, p, up = small_case()
        with pytest.raises(ValueError, match="upstream"):
            gr.rsa_backward(x, spec, p, up[..., :3])

    @pytest.mark.parametrize("L,G_corr,D,normalize,window", [
        (2, None, 2, True, "3x1x1"),
        (1, 1, 3, False, "1x3x1"),
        (3, 2, 2, True, "3x1x3"),
        (6, 1, 1, False, "3x1x1"),
    ])
    def test_central_differences(self, L, G_corr, D, normalize, window):
        x, spec, p, up = small_case(3, L=L, G_corr=G_corr, D=D, normalize=normalize, window=window)
        rep = gr.rsa_gradcheck(x, spec, p, up, eps=1e-5, n_coords=32)
        assert rep.passed(1e-4), rep.to_dict()

    def test_fast_forward_matches_reference_gradient(self):
        x, spec, p, up = small_case(4)
        rep = gr.rsa_gradcheck(x, spec, p, up, forward=rsa_forward_fast, n_coords=32)
        assert rep.passed(1e-4), rep.to_dict()

    @pytest.mark.parametrize("name", ["H2", "P1", "E_K"])
    def test_corrupted_entry_flagged(self, name):
        x, spec, p, up = small_case(5)
        rep = gr.rsa_gradcheck(x, spec, p, up, corrupt=name)
        assert rep.max_rel[name] > 1e-2
        assert not rep.passed(1e-4)


class TestFiniteDiff:
    def test_quadratic_exact(self):
        theta = {"a": make_rng(6).standard_normal((4, 3)), "b": np.array([0.5, -2.0])}
        analytic = {k: 2 * v for k, v in theta.items()}
        # central differences are exact on quadratics; a wide step keeps rounding small
        rep = gr.finite_diff_check(lambda t: sum(np.sum(v * v) for v in t.values()), theta, analytic, eps=1e-3)
        assert rep.worst <= 1e-9
        assert rep.n_coords == {"a": 12, "b": 2}

    def test_subsamples_large_arrays(self):
        theta = {"a": np.ones(500)}
        rep = gr.finite_diff_check(lambda t: float(np.sum(t["a"])), theta, {"a": np.ones(500)}, eps=1e-3,
                                   n_coords=64)
        assert rep.n_coords["a"] == 64 and rep.worst <= 1e-9

    @pytest.mark.parametrize("eps", [1e-8, 1e-2, 0.0])
    def test_eps_out_of_range(self, eps):
        with pytest.raises(ValueError, match="eps"):
            gr.finite_diff_check(lambda t: 0.0, {"a": np.ones(2)}, {"a": np.zeros(2)}, eps=eps)

    def test_non_finite_forward(self):
        with pytest.raises(FloatingPointError):
            gr.finite_diff_check(lambda t: float("nan"), {"a": np.ones(2)}, {"a": np.zeros(2)})

    def test_does_not_mutate_params(self):
        a = np.arange(3.0)
        gr.finite_diff_check(lambda t: float(np.sum(t["a"] ** 2)), {"a": a}, {"a": 2 * a})
        assert a.tolist() == [0.0, 1.0, 2.0]

    def test_report_dict(self):
        rep = gr.GradReport(eps=1e-5, max_rel={"a": 0.1}, max_abs={"a": 0.2}, n_coords={"a": 3})
        assert rep.to_dict()["worst_rel"] == 0.1 and not rep.passed()


class TestNormalizeJacobian:
    def test_projector_orthogonality(self):
        rng = make_rng(7)
        r = rng.standard_normal((200, 5))
        g = gr.l2_normalize_backward(r, rng.standard_normal((200, 5)))
        assert np.max(np.abs(np.sum(g * r, axis=-1))) <= 1e-10

    def test_against_central_differences(self):
        rng = make_rng(8)
        r, w = rng.standard_normal(4), rng.standard_normal(4)

        def f(t):
            v = t["r"]
            return float(w @ (v / np.linalg.norm(v)))

        rep = gr.finite_diff_check(f, {"r": r}, {"r": gr.l2_normalize_backward(r, w)})
        assert rep.worst <= 1e-7


class TestBaselineBackward:
    @pytest.mark.parametrize("flags", [
        {},
        {"use_position": True},
        {"use_content": False, "use_position": True, "use_softmax": False},
        {"use_position": True, "normalize": True},
    ])
    def test_self_attention(self, flags):
        rng = make_rng(9)
        C, spec = 3, NeighborhoodSpec(3, 1, 3)
        E = 0.5 * rng.standard_normal((3, C, C))
        P = 0.5 * rng.standard_normal((spec.M, C))
        p = bl.SaParams(*E, P, **flags)
        x = 0.5 * rng.standard_normal((1, 3, 2, 3, C))
        up = rng.standard_normal(x.shape)
        y, pull = gr.self_attention_vjp(x, spec, p)
        assert np.max(np.abs(y - bl.self_attention(x, spec, p))) <= 1e-12
        g = pull(up)

        def f(t):
            q = bl.SaParams(t["E_Q"], t["E_K"], t["E_V"], t["P"], **flags)
            return float(np.sum(up * bl.self_attention(t["x"], spec, q)))

        theta = {"E_Q": E[0], "E_K": E[1], "E_V": E[2], "P": P, "x": x}
        rep = gr.finite_diff_check(f, theta, g, n_coords=24)
        assert rep.passed(1e-4), rep.to_dict()

    def test_involution(self):
        rng = make_rng(10)
        C, spec = 3, NeighborhoodSpec(3, 3, 1)
        P = rng.standard_normal((spec.M, C))
        x = rng.standard_normal((1, 3, 3, 2, C))
        up = rng.standard_normal(x.shape)
        g = gr.involution_backward(x, spec, P, up)

        def f(t):
            return float(np.sum(up * bl.involution(t["x"], spec, bl.InvolutionParams(t["P"]))))

        rep = gr.finite_diff_check(f, {"P": P, "x": x}, g, n_coords=24)
        assert rep.passed(1e-6), rep.to_dict()

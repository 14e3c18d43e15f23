import math

import numpy as np
import pytest
import torch

from egpssm.data import InvalidConfig
from egpssm.numerics import DimensionMismatch
from egpssm.training import (
    LOG_HEADER,
    AdamState,
    ParamVector,
    TrainConfig,
    adam_step,
    clip_by_norm,
    fit,
    iteration_seed,
    smoothed,
    value_and_grad,
)

from .helpers import set_prior_q, tiny_model


def central_differences(model, seqs, n_mc, seed, h=1e-5):
    base = ParamVector.from_model(model)
    out = np.empty(len(base))
    for i in range(len(base)):
        vals = base.values.copy()
        vals[i] += h
        base.like(vals).assign_to(model)
        fp = model.elbo_terms(seqs, n_mc, seed)[0].item()
        vals[i] -= 2 * h
        base.like(vals).assign_to(model)
        fm = model.elbo_terms(seqs, n_mc, seed)[0].item()
        out[i] = (fp - fm) / (2 * h)
    base.assign_to(model)
    return out


def assert_grad_matches(model, seqs, seed=4):
    value, grad = value_and_grad(model, seqs, n_mc=3, seed=seed)
    fd = central_differences(model, seqs, 3, seed)
    g = grad.values
    rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-300)
    ok = (rel < 1e-4) | (np.abs(g - fd) < 1e-7)
    bad = [(n, i) for n, sl in grad.index.items() for i in range(sl.start, sl.stop) if not ok[i]]
    assert not bad, f"mismatched coordinates: {bad[:5]}"
    assert value == pytest.approx(model.elbo_terms(seqs, 3, seed)[0].item(), abs=1e-9)


@pytest.mark.parametrize("point", [0, 1, 2])
@pytest.mark.parametrize("kind,flow", [("egpssm", "sal"), ("baseline", "linear")])
def test_gradient_matches_finite_differences(kind, flow, point):
    model, seqs = tiny_model(kind=kind, flow=flow, T=5, m=3, seed=point)
    assert_grad_matches(model, seqs, seed=point)


def test_gradient_with_controls_and_linear_flow():
    model, seqs = tiny_model(kind="egpssm", flow="linear", d_c=1, T=4, m=3, seed=7)
    assert_grad_matches(model, seqs)


def test_kl_x0_gradient():
    model, seqs = tiny_model(perturb=0.0)
    mu = torch.tensor([[0.3, -1.2], [2.0, 0.5]], dtype=torch.float64)
    with torch.no_grad():
        model.x0.mean.copy_(mu)
        model.x0.logvar.zero_()
    *_, kl_x0 = model.elbo_terms(seqs, 1, 0)
    (g,) = torch.autograd.grad(kl_x0, model.x0.mean)
    assert torch.allclose(g, mu, atol=1e-14)


def test_stationary_point_has_vanishing_gradient():
    # alpha = 0 cuts the GP and x0 out of the likelihood; with q(u) = p(u) and
    # q(x0) = p(x0) their gradients vanish, leaving a concave problem in (beta, R)
    model, seqs = tiny_model(kind="egpssm", flow="linear", T=4, m=3, perturb=0.0)
    set_prior_q(model)
    with torch.no_grad():
        model.flows.alpha.zero_()
    model.flows.alpha.requires_grad_(False)
    model.ssm.Q_logvar.requires_grad_(False)
    free = [model.flows.beta, model.ssm.R_logvar]
    opt = torch.optim.LBFGS(free, lr=1.0, max_iter=500, tolerance_grad=1e-14, tolerance_change=0,
                            line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = -model.elbo_terms(seqs, 2, 0)[0]
        loss.backward()
        return loss

    for _ in range(3):
        opt.step(closure)
    _, grad = value_and_grad(model, seqs, n_mc=2, seed=0)
    assert "flows.alpha" not in grad.names()
    assert np.linalg.norm(grad.values) < 1e-8


class TestAdam:
    cfg = TrainConfig(learning_rate=0.01)

    def test_first_step_is_sign_step(self):
        p = ParamVector(np.array([1.0, -2.0, 0.5]), {"a": slice(0, 3)}, {"a": (3,)})
        g = p.like(np.array([3.0, -1e-3, 40.0]))
        new, _ = adam_step(p, g, AdamState.zeros(3), self.cfg, 1)
        step = new.values - p.values
        assert np.allclose(step, 0.01 * np.sign(g.values), rtol=1e-4)

    def test_zero_gradient_leaves_params(self):
        p = ParamVector(np.array([1.0, 2.0]), {"a": slice(0, 2)}, {"a": (2,)})
        new, st = adam_step(p, p.like(np.zeros(2)), AdamState.zeros(2), self.cfg, 1)
        assert np.array_equal(new.values, p.values)

    def test_deterministic(self):
        p = ParamVector(np.array([0.1, 0.2]), {"a": slice(0, 2)}, {"a": (2,)})
        g = p.like(np.array([0.5, -0.3]))
        st = AdamState(np.array([0.1, 0.0]), np.array([0.2, 0.1]))
        a = adam_step(p, g, st, self.cfg, 4)
        b = adam_step(p, g, st, self.cfg, 4)
        assert np.array_equal(a[0].values, b[0].values) and np.array_equal(a[1].m, b[1].m)

    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(0)
        p = ParamVector(rng.standard_normal(4), {"a": slice(0, 4)}, {"a": (4,)})
        st = AdamState.zeros(4)
        x, m, v = p.values.copy(), np.zeros(4), np.zeros(4)
        for t in range(1, 6):
            g = rng.standard_normal(4)
            p, st = adam_step(p, p.like(g), st, self.cfg, t)
            m = 0.9 * m + 0.1 * g
            v = 0.99 * v + 0.01 * g * g
            x = x + 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
        assert np.allclose(p.values, x, rtol=0, atol=1e-15)

    def test_errors(self):
        p = ParamVector(np.zeros(2), {"a": slice(0, 2)}, {"a": (2,)})
        with pytest.raises(DimensionMismatch):
            adam_step(p, p.like(np.zeros(2)), AdamState.zeros(3), self.cfg, 1)
        with pytest.raises(DimensionMismatch):
            p.like(np.zeros(3))
        with pytest.raises(ValueError):
            adam_step(p, p.like(np.zeros(2)), AdamState.zeros(2), self.cfg, 0)


class TestParamVector:
    def test_round_trip(self):
        model, _ = tiny_model()
        pv = ParamVector.from_model(model)
        assert pv.names() == [n for n, _ in model.named_parameters()]
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        pv.like(pv.values + 1.0).assign_to(model)
        pv.assign_to(model)
        for n, p in model.named_parameters():
            assert torch.equal(p, before[n])
            assert np.array_equal(pv[n], before[n].numpy())

    def test_order_is_deterministic(self):
        a, _ = tiny_model(seed=1)
        b, _ = tiny_model(seed=2)
        pa, pb = ParamVector.from_model(a), ParamVector.from_model(b)
        assert pa.index == pb.index and pa.shapes == pb.shapes


def test_clip_by_norm():
    g = ParamVector(np.array([30.0, 40.0]), {"a": slice(0, 2)}, {"a": (2,)})
    assert np.allclose(clip_by_norm(g, 10.0).values, [6.0, 8.0])
    assert clip_by_norm(g, None) is g
    assert clip_by_norm(g, 100.0) is g


class TestFit:
    def test_rejects_zero_iterations(self):
        model, seqs = tiny_model()
        with pytest.raises(InvalidConfig):
            fit(model, seqs, TrainConfig(iterations=0))
        with pytest.raises(InvalidConfig):
            TrainConfig(learning_rate=0).validate()
        with pytest.raises(InvalidConfig):
            TrainConfig(adam_beta2=1.0).validate()

    def test_deterministic_curves(self):
        runs = []
        for _ in range(2):
            model, seqs = tiny_model(seed=3)
            res = fit(model, seqs, TrainConfig(iterations=15, n_mc=2, seed=5, log_every=5))
            runs.append((res.curve, [p.detach().clone() for p in model.parameters()]))
        assert runs[0][0] == runs[1][0]
        assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))

    def test_log_format(self):
        import io

        model, seqs = tiny_model()
        stream = io.StringIO()
        res = fit(model, seqs, TrainConfig(iterations=10, n_mc=1, log_every=4), log_stream=stream)
        lines = stream.getvalue().splitlines()
        assert lines[0] == LOG_HEADER
        assert [int(l.split(",")[0]) for l in lines[1:]] == [1, 4, 8, 10]
        assert all(len(l.split(",")) == 5 for l in lines[1:])
        assert res.log_text == stream.getvalue()

    def test_ascent_on_tiny_problem(self):
        model, seqs = tiny_model(kind="egpssm", flow="sal", n_seq=3, T=8, m=5, perturb=0.0)
        res = fit(model, seqs, TrainConfig(iterations=500, n_mc=4, seed=0, log_every=100))
        sm = smoothed(res.curve, 50)
        assert sm[-1] > res.curve[0][1]

    def test_variances_stay_positive(self):
        model, seqs = tiny_model()
        fit(model, seqs, TrainConfig(iterations=60, learning_rate=0.5, n_mc=2, clip_norm=None))
        assert torch.all(model.ssm.Q > 0) and torch.all(model.ssm.R > 0)
        assert torch.all(model.kernel.variance > 0) and torch.all(model.kernel.lengthscales > 0)
        assert torch.all(model.x0.var > 0)
        assert torch.all(torch.diagonal(model.gp.S_factor) > 0)

    def test_minibatch_runs(self):
        model, seqs = tiny_model(n_seq=4)
        res = fit(model, seqs, TrainConfig(iterations=5, n_mc=1, batch_size=2))
        assert len(res.curve) == 5 and all(math.isfinite(v) for _, v in res.curve)


def test_iteration_seed_and_smoothing():
    assert iteration_seed(0, 1) == iteration_seed(0, 1) != iteration_seed(0, 2)
    curve = [(i, float(i)) for i in range(1, 6)]
    assert np.allclose(smoothed(curve, 2), [1.0, 1.5, 2.5, 3.5, 4.5])

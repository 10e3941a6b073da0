import math

import numpy as np
import pytest
import torch

from magpose import nn_engine as E
from magpose.errors import ContractError, NumericError

from oracles import fd_check


def rnd(*shape, seed=0, scale=1.0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * scale


CONV_CASES = [
    (1, 3, 4, 1, 1, 1), (2, 4, 6, 3, 1, 1), (2, 4, 4, 3, 2, 1), (2, 6, 6, 3, 1, 6),
    (1, 8, 8, 3, 2, 8), (3, 2, 5, 1, 2, 1), (2, 4, 8, 1, 1, 2), (1, 6, 3, 3, 1, 3),
]


@pytest.mark.parametrize("b,c_in,c_out,k,stride,groups", CONV_CASES)
def test_conv2d_gradient(b, c_in, c_out, k, stride, groups):
    x = rnd(b, c_in, 5, 5, seed=1)
    wt = rnd(c_out, c_in // groups, k, k, seed=2)
    assert fd_check(lambda x, w: E.conv2d(x, w, stride, groups), [x, wt]) < 1e-5


def naive_conv(x, w, stride, groups):
    """Six nested loops over batch, output channel, output pixel, input channel, kernel row, kernel column."""
    b, c_in, h, wd = x.shape
    c_out, cg, k, _ = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((b, c_out, ho, wo))
    per_group_out = c_out // groups
    for n in range(b):
        for o in range(c_out):
            g = o // per_group_out
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for c in range(cg):
                        for u in range(k):
                            for v in range(k):
                                s += xp[n, g * cg + c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = s
    return out


@pytest.mark.parametrize("b,c_in,c_out,k,stride,groups", CONV_CASES)
def test_conv2d_matches_naive_loops(b, c_in, c_out, k, stride, groups):
    x = rnd(b, c_in, 5, 4, seed=3)
    wt = rnd(c_out, c_in // groups, k, k, seed=4)
    got = E.conv2d(x, wt, stride, groups).numpy()
    np.testing.assert_allclose(got, naive_conv(x.numpy(), wt.numpy(), stride, groups), rtol=1e-12, atol=1e-12)


def test_conv2d_contracts():
    x = rnd(1, 4, 4, 4)
    with pytest.raises(ContractError):
        E.conv2d(x, rnd(4, 4, 5, 5))
    with pytest.raises(ContractError):
        E.conv2d(x, rnd(4, 4, 3, 3), stride=3)
    with pytest.raises(ContractError):
        E.conv2d(x, rnd(4, 3, 3, 3))


@pytest.mark.parametrize("shape", [(4, 3, 2, 2), (2, 5, 3, 3), (8, 2, 1, 1)])
def test_batch_norm_gradient(shape):
    c = shape[1]
    x = rnd(*shape, seed=5)
    gamma = 1 + rnd(c, seed=6, scale=0.1)
    beta = rnd(c, seed=7)

    def f(x, g, b):
        return E.batch_norm(x, g, b, torch.zeros(c, dtype=torch.float64), torch.ones(c, dtype=torch.float64), True)

    assert fd_check(f, [x, gamma, beta]) < 1e-5


def test_batch_norm_statistics():
    x = rnd(16, 3, 4, 4, seed=8, scale=3.0) + 2.0
    rm, rv = torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64)
    y = E.batch_norm(x, torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64), rm, rv, True)
    np.testing.assert_allclose(y.mean(dim=(0, 2, 3)).numpy(), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(dim=(0, 2, 3), unbiased=False).numpy(), 1, rtol=1e-4)
    mean = x.mean(dim=(0, 2, 3))
    var_unbiased = x.var(dim=(0, 2, 3), unbiased=True)
    np.testing.assert_allclose(rm.numpy(), 0.1 * mean.numpy(), rtol=1e-12)
    np.testing.assert_allclose(rv.numpy(), 0.9 + 0.1 * var_unbiased.numpy(), rtol=1e-12)
    # eval mode uses the running estimates only
    y_eval = E.batch_norm(x, torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64), rm, rv, False)
    expected = (x - rm[None, :, None, None]) / torch.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(y_eval.numpy(), expected.numpy(), rtol=1e-12)


def test_batch_norm_needs_two_samples_in_training():
    one = rnd(1, 3, 2, 2)
    with pytest.raises(ContractError):
        E.batch_norm(one, torch.ones(3), torch.zeros(3), torch.zeros(3), torch.ones(3), True)
    E.batch_norm(one.float(), torch.ones(3), torch.zeros(3), torch.zeros(3), torch.ones(3), False)


def test_relu6_values_and_gradient():
    x = torch.tensor([-3.0, 0.0, 2.5, 6.0, 9.0], dtype=torch.float64, requires_grad=True)
    y = E.relu6(x)
    np.testing.assert_array_equal(y.detach().numpy(), [0, 0, 2.5, 6, 6])
    (g,) = torch.autograd.grad(y.sum(), x)
    np.testing.assert_array_equal(g.numpy(), [0, 0, 1, 0, 0])
    # away from the kinks
    xs = torch.tensor([-1.3, 0.7, 3.1, 5.2, 7.4], dtype=torch.float64)
    assert fd_check(E.relu6, [xs]) < 1e-5


@pytest.mark.parametrize("bias", [False, True])
def test_se_block_gradient(bias):
    x = rnd(2, 4, 3, 3, seed=9)
    wr, we = rnd(2, 4, seed=10), rnd(4, 2, seed=11)
    if bias:
        br, be = rnd(2, seed=12), rnd(4, seed=13)
        assert fd_check(E.se_block, [x, wr, we, br, be]) < 1e-5
    else:
        assert fd_check(E.se_block, [x, wr, we]) < 1e-5


def test_se_block_fixtures():
    x = rnd(2, 16, 3, 3, seed=14)
    # zero weights: sigmoid(0) = 1/2 everywhere
    y = E.se_block(x, torch.zeros(1, 16, dtype=torch.float64), torch.zeros(16, 1, dtype=torch.float64))
    np.testing.assert_allclose(y.numpy(), 0.5 * x.numpy(), rtol=1e-15)
    # huge positive expand bias: gate saturates to 1
    y = E.se_block(x, torch.zeros(1, 16, dtype=torch.float64), torch.zeros(16, 1, dtype=torch.float64),
                   None, torch.full((16,), 50.0, dtype=torch.float64))
    np.testing.assert_allclose(y.numpy(), x.numpy(), rtol=1e-12)
    with pytest.raises(ContractError):
        E.se_block(x, torch.zeros(1, 8), torch.zeros(16, 1))
    se = E.SEBlock(32, reduction=16)
    assert E.count_parameters(se) == 2 * 32 * 2


def test_pool_linear_pad():
    x = rnd(2, 3, 4, 4, seed=15)
    np.testing.assert_allclose(E.adaptive_avg_pool_1x1(x).numpy()[..., 0, 0], x.numpy().mean(axis=(2, 3)), rtol=1e-14)
    assert fd_check(E.adaptive_avg_pool_1x1, [x]) < 1e-5
    w, b = rnd(5, 3, seed=16), rnd(5, seed=17)
    v = rnd(4, 3, seed=18)
    np.testing.assert_allclose(E.linear(v, w, b).numpy(), v.numpy() @ w.numpy().T + b.numpy(), rtol=1e-14)
    assert fd_check(E.linear, [v, w, b]) < 1e-5
    p = E.zero_pad(x, 2)
    assert p.shape == (2, 3, 8, 8)
    np.testing.assert_array_equal(p[:, :, 2:6, 2:6].numpy(), x.numpy())
    assert float(p.abs().sum() - x.abs().sum()) == pytest.approx(0.0, abs=1e-12)
    assert fd_check(lambda t: E.zero_pad(t, 1), [x]) < 1e-5
    with pytest.raises(ContractError):
        E.zero_pad(x, -1)
    with pytest.raises(ContractError):
        E.linear(v, rnd(5, 4))


def test_adam_first_step_closed_form():
    p = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    g = torch.tensor([0.3, -0.1, 0.0], dtype=torch.float64)
    state = E.OptimizerState()
    E.adam_step([p], [g], state, lr=0.01)
    # m_hat = g and v_hat = g^2 after one step
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g.numpy() / (np.abs(g.numpy()) + 1e-8)
    np.testing.assert_allclose(p.numpy(), expected, rtol=1e-14)
    assert state.step == 1


def test_adam_second_step_matches_reference():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=4)
    gs = [rng.normal(size=4) for _ in range(3)]
    p = torch.tensor(p0)
    state = E.OptimizerState()
    for g in gs:
        E.adam_step([p], [torch.tensor(g)], state, lr=1e-3)
    m = np.zeros(4)
    v = np.zeros(4)
    ref = p0.copy()
    for t, g in enumerate(gs, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.numpy(), ref, rtol=1e-12)


def test_adam_rejects_non_finite():
    p = torch.zeros(2)
    with pytest.raises(NumericError):
        E.adam_step([p], [torch.tensor([1.0, float("nan")])], E.OptimizerState(), 1e-3)


def test_cosine_schedule():
    assert E.cosine_lr(1e-3, 0, 30) == pytest.approx(1e-3)
    assert E.cosine_lr(1e-3, 15, 30) == pytest.approx(5e-4)
    assert E.cosine_lr(1e-3, 30, 30) == pytest.approx(0.0, abs=1e-20)
    vals = [E.cosine_lr(1.0, e, 10) for e in range(11)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ContractError):
        E.cosine_lr(1.0, 0, 0)


def test_init_bounds():
    conv = E.Conv2d(8, 16, 3, generator=torch.Generator().manual_seed(0))
    bound = math.sqrt(1 / (8 * 9))
    assert conv.weight.abs().max().item() <= bound
    assert conv.weight.abs().max().item() > 0.9 * bound
    assert conv.flops(4, 4) == 2 * 9 * 8 * 16 * 16
    assert E.conv_param_count(8, 16, 3) == E.count_parameters(conv)

import math

import numpy as np
import pytest

from pidenn import nn
from pidenn.gradcheck import check_loss, gradcheck_model, random_step_batch
from pidenn.model import NonFiniteError, TimeGrid, gaussian_levy
from pidenn.scheme import (
    StepBatch,
    StepSample,
    f_step,
    frozen_u,
    lambda_integral_nn,
    loss_and_grad,
    step_map_F,
    stochastic_jump_term_nn,
    terminal_u,
)
from pidenn.sim import JumpRecord

from conftest import make_model


def affine(d_in, w, b=0.0):
    spec = nn.MlpSpec(d_in, 1)
    return nn.MlpParams(spec, [np.array([w], dtype=float)], [np.array([b], dtype=float)])


def g_equals_y():
    return affine(2, [0.0, 1.0])


def no_jumps(d=1):
    return JumpRecord(0, np.zeros(0), np.zeros((0, d)))


def test_lambda_integral_examples():
    zero = nn.MlpParams.zeros(nn.MlpSpec(2, 1, (3,)))
    assert lambda_integral_nn(zero, [0.3], [[0.1], [0.2]], 2.0) == 0.0
    assert lambda_integral_nn(g_equals_y(), [0.3], [[0.1]], 0.0) == 0.0
    val = lambda_integral_nn(g_equals_y(), [0.3], [[0.2], [-0.4], [0.8]], 2.0)
    assert val == pytest.approx(0.4, abs=1e-15)


def test_jump_term_examples():
    zero = nn.MlpParams.zeros(nn.MlpSpec(2, 1))
    assert stochastic_jump_term_nn(zero, [0.0], no_jumps(), 0.1, 1.0, [[0.5]]) == 0.0
    const = affine(2, [0.0, 0.0], 1.0)
    one = JumpRecord(0, np.array([0.05]), np.array([[0.7]]))
    assert stochastic_jump_term_nn(const, [0.0], one, 0.1, 1.0, [[0.3], [-2.0]]) == pytest.approx(0.9)
    two = JumpRecord(0, np.array([0.02, 0.07]), np.array([[0.5], [-0.2]]))
    val = stochastic_jump_term_nn(g_equals_y(), [0.0], two, 0.1, 2.0, [[0.1], [0.3]])
    assert val == pytest.approx(0.26, abs=1e-15)


def test_f_step_examples():
    m0 = make_model(1)
    v, fy, fz, fw = f_step(m0, 0.0, [[0.0]], [1.0], [[0.0]], [0.5])
    assert v[0] == 0 and fy[0] == 0 and fz[0, 0] == 0 and fw[0] == 0
    m1 = make_model(1, driver=lambda t, x, y, z, w: y.copy())
    v, fy, _, _ = f_step(m1, 0.0, [[0.0]], [1.3], [[0.0]], [0.0])
    assert v[0] == 1.3 and fy[0] == pytest.approx(1.0, abs=1e-9)
    m2 = make_model(1, driver=lambda t, x, y, z, w: y + 2 * w)
    v, fy, fz, fw = f_step(m2, 0.0, [[0.0]], [1.0], [[0.0]], [0.5])
    assert v[0] == 2.0
    assert fw[0] == pytest.approx(2.0, abs=1e-9)
    assert fz[0, 0] == 0.0


def test_f_step_analytic_partials_agree_with_fd():
    rng = np.random.default_rng(0)
    x, y, z, w = rng.standard_normal((5, 2)), rng.standard_normal(5), rng.standard_normal((5, 2)), rng.standard_normal(5)
    fd = f_step(gradcheck_model(2), 0.3, x, y, z, w)
    an = f_step(gradcheck_model(2, analytic=True), 0.3, x, y, z, w)
    for a, b in zip(an, fd):
        np.testing.assert_allclose(a, b, rtol=1e-7, atol=1e-9)


def test_f_step_non_finite():
    m = make_model(1, driver=lambda t, x, y, z, w: y / 0.0)
    with np.errstate(divide="ignore", invalid="ignore"), pytest.raises(NonFiniteError, match="driver"):
        f_step(m, 0.0, [[0.0]], [1.0], [[0.0]], [0.0])


def test_step_map_identity_in_y_slot():
    m = make_model(1, levy=gaussian_levy(1, 1.0))
    t = nn.trinet_init(1, seed=0)
    t = nn.TriNet(t.u_net, nn.MlpParams.zeros(t.z_net.spec), nn.MlpParams.zeros(t.g_net.spec))
    s = StepSample(np.array([0.4]), np.array([0.5]), np.array([0.3]),
                   JumpRecord(0, np.array([0.1]), np.array([[1.0]])), np.array([[0.2], [0.1]]))
    val, _ = step_map_F(m, 0.0, 0.1, [s], t)
    assert val[0] == pytest.approx(nn.predict(t.u_net, [0.4])[0], abs=1e-15)


def test_step_map_zero_h():
    m = make_model(1, driver=lambda t, x, y, z, w: 5 + y)
    t = nn.trinet_init(1, seed=1)
    s = StepSample(np.array([0.4]), np.array([0.5]), np.array([0.3]), no_jumps(), np.zeros((0, 1)))
    val, _ = step_map_F(m, 0.0, 0.0, [s], t)
    expected = nn.predict(t.u_net, [0.4])[0] + 0.3 * nn.predict(t.z_net, [0.4])[0]
    assert val[0] == pytest.approx(expected, abs=1e-14)


def test_step_map_matches_scalar_reimplementation():
    # affine toy nets: U = a x + b, Z = c x, G = e y + k x; scalar re-evaluation with math only
    a, b, c, e, k = 0.7, -0.2, 1.3, 0.9, 0.4
    trinet = nn.TriNet(affine(1, [a], b), affine(1, [c]), affine(2, [k, e]))
    lam, h, t_i = 1.7, 0.05, 0.25
    model = gradcheck_model(1, rate=lam)
    x, dw = 0.6, -0.15
    marks, lmarks = [0.3, -1.1], [0.5, -0.25, 1.5]
    s = StepSample(np.array([x]), np.array([0.0]), np.array([dw]),
                   JumpRecord(0, np.array([0.1, 0.2]), np.array(marks)[:, None]), np.array(lmarks)[:, None])
    val, _ = step_map_F(model, t_i, h, [s], trinet)

    u = a * x + b
    z = c * x
    gbar = lam * sum(e * y + k * x for y in lmarks) / len(lmarks)
    jump = sum(e * y + k * x for y in marks) - h * gbar
    f = 0.3 * math.sin(u) + 0.2 * math.tanh(z) + 0.25 * gbar * math.cos(u) + 0.1 * x + t_i
    expected = u - h * f + dw * z + jump
    assert val[0] == pytest.approx(expected, abs=1e-12)


def test_loss_zero_case():
    m = make_model(1)
    t = nn.TriNet(*(nn.MlpParams.zeros(p.spec) for p in nn.trinet_init(1).nets()))
    batch = random_step_batch(1, 8, 2, np.random.default_rng(0))
    est = loss_and_grad(m, TimeGrid(1.0, 4), 0, batch, lambda x: np.zeros(len(x)), t)
    assert est.value == 0.0
    assert np.all(est.grads.flatten() == 0)


@pytest.mark.parametrize("analytic", [False, True])
@pytest.mark.parametrize("act", nn.BOUNDED_ACTIVATIONS)
def test_loss_gradient_matches_finite_differences(analytic, act):
    assert check_loss(1, (4,), act, seed=2, analytic=analytic) <= 1e-5


def test_loss_gradient_2d():
    assert check_loss(2, (3, 3), "tanh", seed=5, analytic=True) <= 1e-5


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    m = gradcheck_model(2)
    batch = random_step_batch(2, 10, 3, rng)
    t = nn.trinet_init(2, (5,), seed=2)
    g = TimeGrid(1.0, 5)
    u_next = lambda x: np.sin(x[:, 0])
    a = loss_and_grad(m, g, 1, batch, u_next, t)
    perm = rng.permutation(10)
    b = loss_and_grad(m, g, 1, batch.take(perm), u_next, t)
    assert b.value == pytest.approx(a.value, rel=1e-13)
    np.testing.assert_allclose(b.grads.flatten(), a.grads.flatten(), rtol=1e-11, atol=1e-14)


def test_batch_and_sample_list_agree():
    rng = np.random.default_rng(2)
    m = gradcheck_model(1)
    batch = random_step_batch(1, 6, 2, rng)
    samples = [batch.sample(k) for k in range(batch.size)]
    t = nn.trinet_init(1, (3,), seed=0)
    g = TimeGrid(1.0, 5)
    a = loss_and_grad(m, g, 2, batch, np.cos, t)
    b = loss_and_grad(m, g, 2, samples, np.cos, t)
    assert a.value == b.value


def test_zero_mass_gives_g_no_gradient():
    m = make_model(1, driver=lambda t, x, y, z, w: 0.5 * y + w, jump=lambda x, y: y)
    batch = random_step_batch(1, 8, 2, np.random.default_rng(3))
    t = nn.trinet_init(1, (4,), seed=1)
    est = loss_and_grad(m, TimeGrid(1.0, 4), 0, batch, np.tanh, t)
    assert np.all(est.grads.g_net.flatten() == 0)
    assert lambda_integral_nn(t.g_net, [0.1], [[0.3]], 0.0) == 0.0


def test_frozen_u_is_isolated():
    t = nn.trinet_init(1, seed=0)
    u = frozen_u(t)
    x = np.linspace(-1, 1, 5)[:, None]
    before = u(x)
    t.u_net.weights[0] += 1.0
    np.testing.assert_array_equal(u(x), before)


def test_terminal_u():
    m = make_model(1, terminal=lambda x: x[:, 0] ** 2)
    np.testing.assert_array_equal(terminal_u(m)(np.array([[2.0], [3.0]])), [4.0, 9.0])


def test_non_finite_loss_names_sample():
    m = make_model(1)
    batch = random_step_batch(1, 4, 1, np.random.default_rng(0))
    t = nn.trinet_init(1, (2,))

    def bad(x):
        out = np.zeros(len(x))
        out[2] = np.nan
        return out

    with pytest.raises(NonFiniteError) as err:
        loss_and_grad(m, TimeGrid(1.0, 2), 0, batch, bad, t)
    assert err.value.row == 2


def test_step_index_checked():
    m = make_model(1)
    batch = random_step_batch(1, 2, 1, np.random.default_rng(0))
    with pytest.raises(IndexError):
        loss_and_grad(m, TimeGrid(1.0, 2), 2, batch, np.sin, nn.trinet_init(1, (2,)))


def test_from_samples_roundtrip():
    batch = random_step_batch(2, 5, 3, np.random.default_rng(9))
    back = StepBatch.from_samples([batch.sample(k) for k in range(5)])
    for name in ("x", "x_next", "dW", "jump_owner", "jump_marks", "lambda_marks"):
        np.testing.assert_array_equal(getattr(back, name), getattr(batch, name))

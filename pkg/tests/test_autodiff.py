import numpy as np
import pytest

from panfield import autodiff as ad
from panfield.autodiff import Tape, Var
from panfield.errors import UsageError

OPS = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "scale": lambda a, b: ad.scale(a, -2.5),
    "relu": lambda a, b: ad.relu(a),
    "softplus": lambda a, b: ad.softplus(a),
    "sigmoid": lambda a, b: ad.sigmoid(a),
    "absval": lambda a, b: ad.absval(a),
    "concat": lambda a, b: ad.concat([a, b]),
    "cols": lambda a, b: ad.cols(a, 1, 3),
    "reshape": lambda a, b: ad.reshape(a, (-1,)),
    "take_rows": lambda a, b: ad.take_rows(a, np.array([0, 2, 2, 3])),
    "mean": lambda a, b: ad.mean(a),
}


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


@pytest.mark.parametrize("name", list(OPS))
def test_elementwise_and_structural_ops_match_central_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    a0 = rng.uniform(-2, 2, (4, 4))
    a0[np.abs(a0) < 0.05] = 0.3  # keep away from kinks of relu/abs
    b0 = rng.normal(size=(4, 4))
    proj = rng.normal(size=np.shape(OPS[name](Var(a0), Var(b0)).value))

    def value(a, b):
        return float(np.sum(OPS[name](Var(a), Var(b)).value * proj))

    tape = Tape()
    a, b = tape.param(a0.copy()), tape.param(b0.copy())
    tape.backward(ad.total(ad.mul(OPS[name](a, b), Var(proj))))
    ga = a.grad if a.grad is not None else np.zeros_like(a0)
    np.testing.assert_allclose(ga, numeric_grad(lambda x: value(x, b0), a0), rtol=1e-6, atol=1e-8)
    gb = b.grad if b.grad is not None else np.zeros_like(b0)
    np.testing.assert_allclose(gb, numeric_grad(lambda x: value(a0, x), b0), rtol=1e-6, atol=1e-8)


def test_linear_matches_central_differences():
    rng = np.random.default_rng(0)
    x0, w0, b0 = rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    proj = rng.normal(size=(5, 2))
    tape = Tape()
    x, w, b = tape.param(x0), tape.param(w0), tape.param(b0)
    tape.backward(ad.total(ad.mul(ad.linear(x, w, b), Var(proj))))
    f = lambda X, W, B: float(np.sum((X @ W + B) * proj))  # noqa: E731
    np.testing.assert_allclose(x.grad, numeric_grad(lambda v: f(v, w0, b0), x0), rtol=1e-6)
    np.testing.assert_allclose(w.grad, numeric_grad(lambda v: f(x0, v, b0), w0), rtol=1e-6)
    np.testing.assert_allclose(b.grad, numeric_grad(lambda v: f(x0, w0, v), b0), rtol=1e-6)


def test_weighted_sum_and_fan_in_accumulate():
    tape = Tape()
    a = tape.param(np.array(2.0))
    s = ad.weighted_sum([ad.mul(a, a), a, a], [3.0, 0.5, 0.0])
    tape.backward(s)
    assert a.grad == pytest.approx(3 * 2 * 2.0 + 0.5)


def test_tape_misuse():
    tape = Tape()
    a = tape.param(np.ones(3))
    with pytest.raises(UsageError):
        tape.backward(ad.scale(a, 2.0))  # not scalar
    loss = ad.total(a)
    tape.backward(loss)
    with pytest.raises(UsageError):
        tape.backward(loss)


def test_constants_receive_no_gradient():
    tape = Tape()
    a = tape.param(np.ones(2))
    c = Var(np.full(2, 3.0))
    tape.backward(ad.total(ad.mul(a, c)))
    assert c.grad is None
    np.testing.assert_array_equal(a.grad, [3.0, 3.0])

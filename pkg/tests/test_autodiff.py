import numpy as np
import pytest

from qecnet import autodiff as ad
from qecnet import quat
from qecnet.errors import BadTargetError, ShapeMismatchError


def fd_check(fn, values, analytic, h=1e-5, rtol=1e-4, floor=1e-6):
    """Central-difference oracle: compare df/dx on every component."""
    flat = values.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        fd = (up - down) / (2 * h)
        got = analytic.reshape(-1)[i]
        assert abs(got - fd) <= rtol * max(abs(fd), floor), (
            f"component {i}: analytic {got}, fd {fd}"
        )


def scalar_probe(out: ad.Tensor, probe: np.ndarray) -> ad.Tensor:
    return ad.tsum(ad.mul(out, probe))


class TestBasicOps:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(ad.constant(0.0)).data == pytest.approx(0.5)

    def test_normalize_last4_value(self):
        out = ad.normalize_last4(ad.constant([2.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1, 0, 0, 0])

    def test_normalize_last4_zero_vector_fallback(self):
        ad.reset_events()
        x = ad.parameter(np.zeros(4))
        out = ad.normalize_last4(x)
        np.testing.assert_allclose(out.data, [1, 0, 0, 0])
        assert ad.events.zero_norm == 1
        scalar_probe(out, np.ones(4)).backward()
        np.testing.assert_allclose(x.grad, np.zeros(4))

    @pytest.mark.parametrize(
        "name",
        ["add", "mul", "matmul", "relu", "sigmoid", "normalize", "hamilton",
         "geodesic", "sum_axis", "gather", "embed", "canonicalize", "power"],
    )
    def test_gradients_match_finite_differences(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        if name in ("add", "mul"):
            a = ad.parameter(rng.standard_normal((3, 4)))
            b = ad.parameter(rng.standard_normal(4))  # broadcast
            op = ad.add if name == "add" else ad.mul
            probe = rng.standard_normal((3, 4))
            make = lambda: float(scalar_probe(op(a, b), probe).data)
            out = scalar_probe(op(a, b), probe)
            out.backward()
            fd_check(make, a.data, a.grad)
            fd_check(make, b.data, b.grad)
        elif name == "matmul":
            a = ad.parameter(rng.standard_normal((3, 5)))
            b = ad.parameter(rng.standard_normal((5, 2)))
            probe = rng.standard_normal((3, 2))
            make = lambda: float(scalar_probe(ad.matmul(a, b), probe).data)
            scalar_probe(ad.matmul(a, b), probe).backward()
            fd_check(make, a.data, a.grad)
            fd_check(make, b.data, b.grad)
        elif name in ("relu", "sigmoid"):
            x = ad.parameter(rng.standard_normal(20) + np.sign(rng.standard_normal(20)) * 0.2)
            op = ad.relu if name == "relu" else ad.sigmoid
            probe = rng.standard_normal(20)
            make = lambda: float(scalar_probe(op(x), probe).data)
            scalar_probe(op(x), probe).backward()
            fd_check(make, x.data, x.grad)
        elif name == "normalize":
            x = ad.parameter(quat.random_unit(rng, 6) * rng.uniform(0.5, 2.0, (6, 1)))
            probe = rng.standard_normal((6, 4))
            make = lambda: float(scalar_probe(ad.normalize_last4(x), probe).data)
            scalar_probe(ad.normalize_last4(x), probe).backward()
            fd_check(make, x.data, x.grad)
        elif name == "hamilton":
            p = ad.parameter(quat.random_unit(rng, 5))
            r = ad.parameter(quat.random_unit(rng, 5))
            probe = rng.standard_normal((5, 4))
            make = lambda: float(scalar_probe(ad.hamilton(p, r), probe).data)
            scalar_probe(ad.hamilton(p, r), probe).backward()
            fd_check(make, p.data, p.grad)
            fd_check(make, r.data, r.grad)
        elif name == "geodesic":
            p = ad.parameter(quat.random_unit(rng, 8))
            r = ad.parameter(quat.random_unit(rng, 8))
            probe = rng.standard_normal(8)
            make = lambda: float(scalar_probe(ad.geodesic(p, r), probe).data)
            scalar_probe(ad.geodesic(p, r), probe).backward()
            fd_check(make, p.data, p.grad, rtol=1e-3)
            fd_check(make, r.data, r.grad, rtol=1e-3)
        elif name == "sum_axis":
            x = ad.parameter(rng.standard_normal((4, 3)))
            probe = rng.standard_normal(4)
            make = lambda: float(scalar_probe(ad.tsum(x, axis=1), probe).data)
            scalar_probe(ad.tsum(x, axis=1), probe).backward()
            fd_check(make, x.data, x.grad)
        elif name == "gather":
            x = ad.parameter(rng.standard_normal((6, 3)))
            idx = np.array([0, 2, 2, 5])
            probe = rng.standard_normal((4, 3))
            make = lambda: float(scalar_probe(ad.gather(x, idx), probe).data)
            scalar_probe(ad.gather(x, idx), probe).backward()
            fd_check(make, x.data, x.grad)
        elif name == "embed":
            x = ad.parameter(rng.standard_normal((5, 3)))
            probe = rng.standard_normal((5, 4))
            make = lambda: float(scalar_probe(ad.embed_pure_quat(x), probe).data)
            scalar_probe(ad.embed_pure_quat(x), probe).backward()
            fd_check(make, x.data, x.grad)
        elif name == "canonicalize":
            x = ad.parameter(quat.random_unit(rng, 8))
            probe = rng.standard_normal((8, 4))
            make = lambda: float(scalar_probe(ad.canonicalize_last4(x), probe).data)
            scalar_probe(ad.canonicalize_last4(x), probe).backward()
            fd_check(make, x.data, x.grad)
        elif name == "power":
            x = ad.parameter(rng.uniform(0.5, 2.0, 9))
            probe = rng.standard_normal(9)
            make = lambda: float(scalar_probe(ad.power(x, -0.7), probe).data)
            scalar_probe(ad.power(x, -0.7), probe).backward()
            fd_check(make, x.data, x.grad)

    def test_quat_mean_gradient(self):
        rng = np.random.default_rng(99)
        q = ad.parameter(quat.random_unit(rng, 3, 7))
        w = ad.parameter(rng.uniform(0.2, 1.0, (3, 7)))
        probe = rng.standard_normal((3, 4))
        make = lambda: float(scalar_probe(ad.quat_mean(q, w), probe).data)
        scalar_probe(ad.quat_mean(q, w), probe).backward()
        fd_check(make, q.data, q.grad)
        fd_check(make, w.data, w.grad)

    def test_quat_mean_degenerate_zero_grad(self):
        ad.reset_events()
        q = ad.parameter(np.eye(4))  # orthonormal set -> M = I
        w = ad.parameter(np.ones(4))
        out = ad.quat_mean(q, w)
        assert out.aux is not None and bool(np.all(out.aux))
        assert ad.events.degenerate_mean == 1
        scalar_probe(out, np.ones(4)).backward()
        np.testing.assert_allclose(q.grad, 0.0)
        np.testing.assert_allclose(w.grad, 0.0)

    def test_shape_errors(self):
        with pytest.raises(ShapeMismatchError):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((4, 2))))
        with pytest.raises(ShapeMismatchError):
            ad.normalize_last4(ad.constant(np.ones(3)))


class TestTapeDeterminism:
    def test_bitwise_identical_passes(self):
        def run():
            rng = np.random.default_rng(5)
            w = ad.parameter(rng.standard_normal((6, 4)))
            x = ad.constant(rng.standard_normal((10, 6)))
            out = ad.normalize_last4(ad.matmul(x, w))
            loss = ad.tsum(ad.geodesic(out, quat.random_unit(rng, 10)))
            loss.backward()
            return loss.data.copy(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()

    def test_grad_accumulates_on_reuse(self):
        x = ad.parameter(np.array([2.0]))
        y = ad.mul(x, x)  # x used twice
        y.backward()
        np.testing.assert_allclose(x.grad, [4.0])


class TestLosses:
    def test_spread_loss_values(self):
        assert ad.spread_loss(ad.constant([0.9, 0.1]), 0, 0.2).data == pytest.approx(0.0)
        assert ad.spread_loss(ad.constant([0.5, 0.5]), 0, 0.2).data == pytest.approx(0.04)
        assert ad.spread_loss(ad.constant([0.1, 0.9]), 0, 0.2).data == pytest.approx(1.0)

    def test_spread_loss_bad_target(self):
        with pytest.raises(BadTargetError):
            ad.spread_loss(ad.constant([0.5, 0.5]), 2, 0.2)

    def test_spread_loss_gradient(self):
        rng = np.random.default_rng(3)
        a = ad.parameter(rng.uniform(0.05, 0.45, 5))
        make = lambda: float(ad.spread_loss(a, 2, 0.2).data)
        ad.spread_loss(a, 2, 0.2).backward()
        fd_check(make, a.data, a.grad)

    def test_rotation_loss_values(self):
        q = quat.random_unit(np.random.default_rng(1))
        assert ad.rotation_loss(ad.constant(q), q).data == pytest.approx(0.0, abs=1e-6)
        x180 = quat.quat_from_axis_angle([1, 0, 0], np.pi)
        assert ad.rotation_loss(ad.constant(quat.IDENTITY), x180).data == pytest.approx(np.pi)

    def test_rotation_loss_gradient(self):
        rng = np.random.default_rng(17)
        # keep the pair away from |dot| ~ 1 where the fd oracle itself degrades
        q_gt = quat.IDENTITY
        q = ad.parameter(quat.quat_from_axis_angle(rng.standard_normal(3), 1.1))
        make = lambda: float(ad.rotation_loss(q, q_gt).data)
        ad.rotation_loss(q, q_gt).backward()
        fd_check(make, q.data, q.grad, rtol=1e-3)


class TestAdam:
    def test_zero_gradient_no_update(self):
        p = ad.parameter(np.array([1.0, -2.0]))
        opt = ad.Adam([p])
        p.grad = np.zeros(2)
        before = p.data.copy()
        opt.step()
        np.testing.assert_allclose(p.data, before)

    def test_constant_gradient_step_magnitude(self):
        p = ad.parameter(np.array([0.0]))
        opt = ad.Adam([p], lr=0.01)
        for _ in range(500):
            last = p.data.copy()
            p.grad = np.array([3.7])
            opt.step()
        assert abs(abs(float(last - p.data)) - 0.01) < 1e-3

    def test_quadratic_bowl(self):
        # the textbook recurrence first reaches |x| < 1e-3 at step 2721
        p = ad.parameter(np.array([1.0]))
        opt = ad.Adam([p], lr=0.001)
        for _ in range(3000):
            opt.zero_grad()
            loss = ad.mul(p, p)
            loss.backward(np.ones(1))
            opt.step()
        assert abs(float(p.data[0])) < 1e-3

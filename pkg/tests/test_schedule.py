import math

import numpy as np
import pytest

from opaqpipe.schedule import build_schedule, forward_diffuse, half_log_snr


@pytest.fixture(scope="module")
def table():
    return build_schedule()


def test_endpoints_bit_exact(table):
    assert table.beta_at(1) == 8.5e-4
    assert table.beta_at(1000) == 1.2e-2


def test_midpoint(table):
    ref = (math.sqrt(8.5e-4) + 499 / 999 * (math.sqrt(1.2e-2) - math.sqrt(8.5e-4))) ** 2
    assert table.beta_at(500) == pytest.approx(ref, rel=1e-13)
    assert table.beta_at(500) == pytest.approx(4.804e-3, abs=1e-6)


def test_invariants(table):
    assert np.all((table.beta > 0) & (table.beta < 1))
    assert np.all(np.diff(table.alpha_bar) < 0)
    assert np.all(np.diff(table.lam) < 0)
    assert np.max(np.abs(table.a ** 2 + table.sigma ** 2 - 1)) < 1e-12


def test_half_log_snr(table):
    assert half_log_snr(table, 1) == pytest.approx(math.log(math.sqrt(1 - 8.5e-4) / math.sqrt(8.5e-4)))
    assert half_log_snr(table, 1) == pytest.approx(3.535, abs=1e-3)
    assert half_log_snr(table, 1) > half_log_snr(table, 1000)
    # lam crosses zero where alpha_bar crosses one half
    t0 = int(np.argmin(np.abs(table.alpha_bar - 0.5))) + 1
    assert abs(half_log_snr(table, t0)) < 0.05


def test_fractional_t_interpolates(table):
    assert table.lam_at(10) == half_log_snr(table, 10)
    mid = table.lam_at(10.5)
    assert min(table.lam_at(10), table.lam_at(11)) < mid < max(table.lam_at(10), table.lam_at(11))
    assert table.t_from_lam(table.lam_at(123)) == pytest.approx(123, abs=1e-9)


def test_constant_beta_supported():
    t = build_schedule(10, 0.01, 0.01)
    np.testing.assert_allclose(t.beta, 0.01, rtol=1e-15)


@pytest.mark.parametrize("args", [(1, 1e-4, 1e-2), (100, 0.0, 0.1), (100, 0.2, 0.1), (100, 0.1, 1.0)])
def test_bad_config(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_forward_diffuse_branches(table):
    rng = np.random.default_rng(0)
    z0, eps = rng.standard_normal((3, 4, 4)), rng.standard_normal((3, 4, 4))
    np.testing.assert_array_equal(forward_diffuse(z0, 300, np.zeros_like(z0), table),
                                  table.a_at(300) * z0)
    np.testing.assert_array_equal(forward_diffuse(np.zeros_like(z0), 300, eps, table),
                                  table.sigma_at(300) * eps)
    np.testing.assert_array_equal(forward_diffuse(z0, 300, eps, table),
                                  table.a_at(300) * z0 + table.sigma_at(300) * eps)


def test_forward_diffuse_superposition(table):
    rng = np.random.default_rng(1)
    z1, z2, e1, e2 = (rng.standard_normal(20) for _ in range(4))
    lhs = forward_diffuse(2 * z1 - z2, 700, 2 * e1 - e2, table)
    rhs = 2 * forward_diffuse(z1, 700, e1, table) - forward_diffuse(z2, 700, e2, table)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_forward_diffuse_per_sample_t(table):
    z0 = np.ones((2, 3))
    out = forward_diffuse(z0, np.array([1, 1000]), np.zeros((2, 3)), table)
    np.testing.assert_allclose(out[:, 0], [table.a_at(1), table.a_at(1000)])


def test_forward_diffuse_errors(table):
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), 0, np.zeros(3), table)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), 1001, np.zeros(3), table)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), 5, np.zeros(4), table)

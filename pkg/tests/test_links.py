import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from lcmm_subtypes import links
from lcmm_subtypes.links import LinkDomainError, LinkSpec

shape = st.floats(0.5, 3.0)


def beta_link(a, b, d1=0.0, d2=1.0, rng=(-30.0, 2.0)):
    return LinkSpec("beta", a, b, d1, d2, rng)


def test_identity_examples():
    lk = LinkSpec("identity", value_range=(-1.0, 1.0))
    assert links.transform(np.array([-0.45]), lk)[0] == -0.45
    assert links.inverse_transform(np.array([0.93]), lk)[0] == 0.93
    assert np.all(links.jacobian(np.linspace(-1, 1, 5), lk) == 1.0)


def test_beta22_midpoint_is_half():
    lk = LinkSpec("beta", 2.0, 2.0, 0.0, 1.0, (0.0, 1.0))
    assert links.transform(np.array([0.5]), lk)[0] == pytest.approx(0.5, abs=1e-15)
    # numerical integration of the Beta(2,2) density as a second route
    val, _ = integrate.quad(lambda u: 6 * u * (1 - u), 0, 0.5)
    assert val == pytest.approx(0.5, abs=1e-12)


def test_beta11_reduces_to_rescaled_identity():
    lk = LinkSpec("beta", 1.0, 1.0, 0.0, 1.0, (0.0, 1.0))
    y = np.linspace(0, 1, 1001)
    np.testing.assert_allclose(links.transform(y, lk), links.rescale(y, lk), atol=1e-9)
    np.testing.assert_allclose(links.jacobian(y, lk), 1.0 / (1.0 + 2 * links.RESCALE_EPS), rtol=1e-12)


@given(a=st.floats(0.2, 20), b=st.floats(0.2, 20), x=st.floats(1e-6, 1 - 1e-6))
@settings(max_examples=200, deadline=None)
def test_betainc_matches_scipy(a, b, x):
    assert links.betainc_reg(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=1e-10, abs=1e-14)


@given(a=shape, b=shape, d1=st.floats(-0.5, 0.5), d2=st.floats(0.1, 5.0))
@settings(max_examples=40, deadline=None)
def test_monotone_and_positive_jacobian(a, b, d1, d2):
    lk = beta_link(a, b, d1, d2)
    y = np.linspace(-30.0, 2.0, 1000)
    lam = links.transform(y, lk)
    assert np.all(np.diff(lam) > 0)
    assert np.all(links.jacobian(y, lk) > 0)


@given(a=shape, b=shape)
@settings(max_examples=25, deadline=None)
def test_jacobian_matches_finite_difference(a, b):
    lk = beta_link(a, b, 0.1, 0.8)
    y = np.linspace(-29.0, 1.0, 60)
    h = 1e-5
    fd = (links.transform(y + h, lk) - links.transform(y - h, lk)) / (2 * h)
    np.testing.assert_allclose(links.jacobian(y, lk), fd, rtol=1e-6)


def test_beta22_round_trip():
    lk = LinkSpec("beta", 2.0, 2.0, 0.0, 1.0, (-30.0, 2.0))
    y = np.linspace(-30.0, 2.0, 100)
    back = links.inverse_transform(links.transform(y, lk), lk)
    assert np.max(np.abs(back - y)) < 1e-8


@given(a=shape, b=shape, d1=st.floats(-0.5, 0.5), d2=st.floats(0.1, 5.0))
@settings(max_examples=25, deadline=None)
def test_latent_round_trip(a, b, d1, d2):
    lk = beta_link(a, b, d1, d2)
    lam = links.transform(np.linspace(-29.9, 1.9, 200), lk)
    again = links.transform(links.inverse_transform(lam, lk), lk)
    np.testing.assert_allclose(again, lam, rtol=0, atol=1e-10)


def test_beta51_inverse_increasing():
    lk = LinkSpec("beta", 5.0, 1.0, 0.0, 1.0, (0.0, 1.0))
    lo, hi = links.transform(np.array([0.0, 1.0]), lk)
    y = links.inverse_transform(np.linspace(lo, hi, 300), lk)
    assert np.all(np.diff(y) > 0)


def test_domain_errors():
    lk = LinkSpec("beta", 2.0, 2.0, 0.0, 1.0, (0.0, 1.0))
    with pytest.raises(LinkDomainError):
        links.transform(np.array([1.0 + 1e-6]), lk)
    links.transform(np.array([1.0 + 1e-10]), lk)  # inside the guard
    with pytest.raises(LinkDomainError):
        links.inverse_transform(np.array([2.0]), lk)


def test_invalid_specs():
    with pytest.raises(ValueError):
        LinkSpec("beta", -1.0, 2.0, 0.0, 1.0, (0.0, 1.0))
    with pytest.raises(ValueError):
        LinkSpec("beta", 1.0, 2.0, 0.0, 1.0, (1.0, 1.0))
    with pytest.raises(ValueError):
        LinkSpec("spline", value_range=(0.0, 1.0))


def test_shape_partials_match_finite_differences():
    lk = beta_link(1.7, 2.3, 0.05, 0.9)
    y = np.linspace(-25, 1, 40)
    da, db, dja, djb = links.shape_partials(y, lk)
    h = 1e-6
    for partial, jac_partial, key, val in ((da, dja, "shape_a", 1.7), (db, djb, "shape_b", 2.3)):
        up = lk.with_params(**{key: val * math.exp(h)})
        dn = lk.with_params(**{key: val * math.exp(-h)})
        fd = (links.transform(y, up) - links.transform(y, dn)) / (2 * h)
        fdj = (links.log_jacobian(y, up) - links.log_jacobian(y, dn)) / (2 * h)
        np.testing.assert_allclose(partial, fd, rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(jac_partial, fdj, rtol=1e-5, atol=1e-8)


def test_linkspec_dict_round_trip():
    lk = beta_link(1.5, 2.5, 0.1, 0.7)
    assert LinkSpec.from_dict(lk.to_dict()) == lk

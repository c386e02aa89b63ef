import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from porohyper.exceptions import KinematicError
from porohyper.material import (MaterialParams, cofactor_derivative, linear_elastic_stiffness,
                                material_tangent, nanson_area, pk1, pk1_and_tangent,
                                piola_transform, strain_energy)

nus = st.floats(-0.9, 0.49)
perturbations = arrays(np.float64, (3, 3), elements=st.floats(-0.3, 0.3))


def admissible(F):
    return np.linalg.det(F) > 0.2


def fd_gradient(f, F, h=1e-6):
    G = np.zeros((3, 3) + np.shape(f(F)))
    for k in np.ndindex(3, 3):
        E = np.zeros((3, 3))
        E[k] = h
        G[k] = (f(F + E) - f(F - E)) / (2 * h)
    return G


def test_lame_pair_from_poisson_ratio():
    p = MaterialParams(0.25)
    assert p.mu == pytest.approx(0.4)
    assert p.lam == pytest.approx(0.4)


@pytest.mark.parametrize("nu", [-1.0, 0.5, 0.7])
def test_poisson_ratio_bounds(nu):
    with pytest.raises(ValueError):
        MaterialParams(nu)


@given(nus)
def test_reference_state_is_stress_free(nu):
    p = MaterialParams(nu)
    assert abs(strain_energy(np.eye(3), p)) <= 1e-12
    assert np.abs(pk1(np.eye(3), p)).max() <= 1e-12


def test_energy_uniaxial_stretch_against_high_precision_formula():
    p = MaterialParams(0.25)
    mpmath.mp.dps = 40
    nu = mpmath.mpf("0.25")
    mu, lam = 1 / (2 * (1 + nu)), nu / ((1 + nu) * (1 - 2 * nu))
    J, I1 = mpmath.mpf(2), mpmath.mpf(6)
    ref = mu / 2 * (I1 - 3) - mu * mpmath.log(J) + lam / 2 * mpmath.log(J) ** 2
    assert strain_energy(np.diag([2.0, 1, 1]), p) == pytest.approx(float(ref), rel=1e-14)


def test_singular_deformation_is_rejected():
    with pytest.raises(KinematicError):
        strain_energy(np.diag([0.0, 1, 1]), MaterialParams())
    with pytest.raises(KinematicError):
        pk1(np.diag([-1.0, 1, 1]), MaterialParams())


@settings(max_examples=40, deadline=None)
@given(perturbations)
def test_pk1_is_energy_gradient(D):
    F = np.eye(3) + D
    if not admissible(F):
        return
    p = MaterialParams(0.3)
    P = pk1(F, p)
    G = fd_gradient(lambda X: strain_energy(X, p), F)
    assert np.abs(P - G).max() <= 1e-6 * max(np.abs(P).max(), 1.0)


@settings(max_examples=40, deadline=None)
@given(perturbations)
def test_tangent_is_stress_jacobian(D):
    F = np.eye(3) + D
    if not admissible(F):
        return
    p = MaterialParams(0.3)
    A = material_tangent(F, p)
    G = fd_gradient(lambda X: pk1(X, p), F)      # G[k,l,i,j] = dP_ij / dF_kl
    assert np.abs(A - np.transpose(G, (2, 3, 0, 1))).max() <= 1e-5 * np.abs(A).max()
    assert np.abs(A - np.transpose(A, (2, 3, 0, 1))).max() <= 1e-12 * np.abs(A).max()
    P2, A2 = pk1_and_tangent(F, p)
    np.testing.assert_allclose(P2, pk1(F, p), atol=1e-14)
    np.testing.assert_allclose(A2, A, atol=1e-13)


def test_tangent_at_identity_is_linear_stiffness():
    p = MaterialParams(0.25)
    np.testing.assert_allclose(material_tangent(np.eye(3), p), linear_elastic_stiffness(p), atol=1e-14)


def test_rotation_is_stress_free():
    c, s = np.cos(0.7), np.sin(0.7)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    p = MaterialParams(0.3)
    assert abs(strain_energy(R, p)) <= 1e-12
    assert np.abs(pk1(R, p)).max() <= 1e-12


def test_energy_blows_up_under_compression():
    p = MaterialParams(0.25)
    e = [strain_energy(np.diag([s, 1, 1]), p) for s in (0.5, 0.1, 0.01)]
    assert e[0] < e[1] < e[2]


def test_piola_transform():
    np.testing.assert_allclose(piola_transform(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(piola_transform(np.diag([2.0, 1, 1])), np.diag([1.0, 2, 2]))


@settings(max_examples=25, deadline=None)
@given(perturbations)
def test_piola_identity_and_cofactor_derivative(D):
    F = np.eye(3) + D
    if not admissible(F):
        return
    G = piola_transform(F)
    np.testing.assert_allclose(G @ F, np.linalg.det(F) * np.eye(3), atol=1e-12)
    dC = cofactor_derivative(F)
    fd = fd_gradient(lambda X: piola_transform(X).T, F)
    assert np.abs(dC - np.transpose(fd, (2, 3, 0, 1))).max() <= 1e-6


def test_nanson_mapping():
    v, a, n = nanson_area(np.eye(3), [0, 0, 1.0], 2.0)
    np.testing.assert_allclose(v, [0, 0, 2.0])
    v, a, n = nanson_area(np.diag([2.0, 1, 1]), [1.0, 0, 0])
    np.testing.assert_allclose(v, [1.0, 0, 0])
    assert a == pytest.approx(1.0)


def test_nanson_vectors_close_over_a_deformed_cube(rng):
    F = np.eye(3) + 0.2 * rng.standard_normal((3, 3))
    normals = np.vstack([np.eye(3), -np.eye(3)])
    total = sum(nanson_area(F, N, 1.0)[0] for N in normals)
    assert np.abs(total).max() <= 1e-12

import numpy as np
import pytest

from seesmp.errors import ParabolicityError
from seesmp.spde import (SuperParabolicSpec, check_parabolicity, discretize_superparabolic,
                         stiffness_matrix)


@pytest.mark.exact
def test_laplacian_stencil():
    spec = SuperParabolicSpec(n_space=3, alpha=1.0, beta=0.0, kappa=0.1, length=1.0)
    sys_ = discretize_superparabolic(spec)
    h = 0.25
    lap = (np.diag([-2.0] * 3) + np.diag([1.0] * 2, 1) + np.diag([1.0] * 2, -1)) / h ** 2
    np.testing.assert_array_equal(np.asarray(sys_.A), lap)
    np.testing.assert_array_equal(np.asarray(sys_.B), np.zeros((3, 3)))


@pytest.mark.exact
def test_parabolicity_rejected():
    # beta^2 = 4 > 2 alpha - kappa = 1.9
    with pytest.raises(ParabolicityError):
        check_parabolicity(SuperParabolicSpec(n_space=3, alpha=1.0, beta=2.0, kappa=0.1))


def test_parabolicity_accepted_at_margin():
    check_parabolicity(SuperParabolicSpec(n_space=3, alpha=1.0, beta=1.0, kappa=0.1))


def test_variable_coefficient_stiffness_symmetric():
    spec = SuperParabolicSpec(n_space=5, alpha=lambda t, z: 1.0 + z, beta=0.0, kappa=0.1)
    A = stiffness_matrix(spec)
    np.testing.assert_allclose(A, A.T, rtol=0, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(A) < 0)

"""Shared fixtures: small deterministic test parts."""
import numpy as np
import pytest

from latticeplan import shapes


@pytest.fixture(scope="session")
def small_column():
    return shapes.solid_column(10, 10, 30, 2.5)


@pytest.fixture(scope="session")
def box_column():
    """The 20 x 20 x 60 mm column at ~5k vertices."""
    return shapes.solid_column(20, 20, 60, 5 / 3)


@pytest.fixture(scope="session")
def sphere_part():
    return shapes.solid_sphere(10, 1.8)


@pytest.fixture(scope="session")
def torus_part():
    return shapes.solid_torus(11, 4.5, 1.6)


@pytest.fixture(scope="session")
def cylinder_part():
    return shapes.solid_cylinder(8, 30, 1.6)


@pytest.fixture(scope="session")
def two_columns_part():
    return shapes.solid_two_columns()


@pytest.fixture(scope="session")
def y_part():
    return shapes.solid_y()


@pytest.fixture(scope="session")
def branch3_part():
    return shapes.solid_branches()


@pytest.fixture()
def single_tet():
    return shapes.single_tet()


@pytest.fixture()
def two_tets():
    return shapes.two_tets()


@pytest.fixture()
def rng():
    return np.random.default_rng(20260823)

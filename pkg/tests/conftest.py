import pytest

from cmrbound.dgp import dgp_a, dgp_b, dgp_c, dgp_q, random_design


@pytest.fixture(scope="session")
def exp_a():
    return dgp_a()


@pytest.fixture(scope="session")
def exp_b():
    return dgp_b()


@pytest.fixture(scope="session")
def exp_c():
    return dgp_c()


@pytest.fixture(scope="session")
def exp_c_resp():
    return dgp_c("missing-response")


@pytest.fixture(scope="session")
def exp_q():
    return dgp_q()


def random_designs(count=20, start=100):
    """Seeded random laws, alternating d = 1 and d = 2."""
    return [random_design(start + i, d=1 + i % 2) for i in range(count)]

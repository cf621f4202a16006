import numpy as np
import pytest

from otdistill.models import tempered_softmax


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_instance(rng, r1, r2, cost_scale=3.0, logit_scale=2.0, tau=3.0):
    """Random transport problem with softmax marginals and a bounded cost."""
    mu = tempered_softmax(rng.normal(0.0, logit_scale, r1), tau)
    nu = tempered_softmax(rng.normal(0.0, logit_scale, r2), tau)
    M = rng.uniform(0.0, cost_scale, (r1, r2))
    return mu, nu, M

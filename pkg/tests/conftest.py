import numpy as np
import pytest

from wmdp.mdp import FiniteMDP


def cycle_model(costs=(0.0, 1.0)):
    kernel = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    return FiniteMDP([0.0, 1.0], [0.0], kernel, np.array(costs, dtype=float)[:, None])


def single_state(cost=2.0, n_actions=1):
    costs = np.atleast_1d(np.asarray(cost, dtype=float))
    if costs.size == 1:
        costs = np.full(n_actions, costs[0])
    return FiniteMDP([0.0], np.arange(costs.size, dtype=float), np.ones((1, costs.size, 1)), costs[None, :])


@pytest.fixture
def cycle():
    return cycle_model()

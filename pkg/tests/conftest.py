import numpy as np
import pytest

from lhts.ar_model import TabularAR


@pytest.fixture
def counterexample_model() -> TabularAR:
    """Two-token, two-position model whose joint argmax disagrees with its
    greedy path: p(x0)=[0.6,0.4], p(x1|0)=[0.55,0.45], p(x1|1)=[0.9,0.1].
    Joint: 00->0.33, 01->0.27, 10->0.36, 11->0.04."""
    return TabularAR.from_conditionals(
        2, 2, {(): [0.6, 0.4], (0,): [0.55, 0.45], (1,): [0.9, 0.1]}
    )


@pytest.fixture
def uniform_model() -> TabularAR:
    return TabularAR(2, 3)

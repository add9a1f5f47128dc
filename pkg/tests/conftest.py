import numpy as np
import pytest

from nisyn.expr import parse_expr
from nisyn.synthesis import NormalFormPlant, SynthesisSpec, synthesize


@pytest.fixture(scope="session")
def example_plant():
    """Scalar internal dynamics z' = -z + xi1^2*xi2 with one output of each
    relative degree."""
    return NormalFormPlant(
        a11=np.array([[-1.0]]),
        p=(parse_expr("xi1^2*xi2", ["xi1", "xi2"]),),
        p1=1,
        p2=1,
    )


@pytest.fixture(scope="session")
def example_spec():
    return SynthesisSpec(
        p_matrix=np.array([[1.0]]),
        v2=parse_expr("xi1^(4/3)+xi2^2", ["xi1", "xi2"]),
        lam=1.0,
    )


@pytest.fixture(scope="session")
def example_cl(example_plant, example_spec):
    return synthesize(example_plant, example_spec)

import warnings

import numpy as np
import pytest

from ghost_embed.gga import DegenerateBathWarning, self_consistency


@pytest.fixture(scope="session")
def converged_b3():
    """Converged metallic fixed point at U = 2.5, B = 3 (ED solver)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateBathWarning)
        res = self_consistency(U=2.5, B=3)
    assert res.converged
    return res


@pytest.fixture(scope="session")
def converged_b1():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateBathWarning)
        res = self_consistency(U=2.5, B=1)
    assert res.converged
    return res

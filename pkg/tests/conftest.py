import numpy as np
import pytest

from sketchls.matio import MatrixHandle
from sketchls.rng import stream

DATA_DIR_CANDIDATES = ("data", "tests/data")


def random_tall(m: int, n: int, seed: int) -> MatrixHandle:
    """Unstructured dense tall matrix; condition number stays modest."""
    return MatrixHandle(stream(seed, "tall", m, n).standard_normal((m, n)))


def random_rhs(m: int, seed: int) -> np.ndarray:
    return stream(seed, "rhs", m).standard_normal(m)


@pytest.fixture(scope="session")
def suitesparse_dir(request):
    root = request.config.rootpath
    for cand in DATA_DIR_CANDIDATES:
        path = root / cand
        if path.is_dir():
            return path
    return root / "data"

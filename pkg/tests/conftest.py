import numpy as np
import pytest

from copsim.geometry import PointCloud


def random_cloud(rng: np.random.Generator, n: int = 100, frame: str = "a0",
                 span: float = 20.0, z_span: float = 2.0) -> PointCloud:
    pts = np.column_stack(
        [
            rng.uniform(-span, span, n),
            rng.uniform(-span, span, n),
            rng.uniform(0.0, z_span, n),
            rng.uniform(0.0, 1.0, n),
        ]
    )
    return PointCloud(pts, frame)


def f32_grained(rng: np.random.Generator, shape, low=-1.0, high=1.0) -> np.ndarray:
    """Random float64 values exactly representable as f32 (for file round trips)."""
    return rng.uniform(low, high, shape).astype(np.float32).astype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import pytest

from beatstream.model_io import build_demo_checkpoint


@pytest.fixture(scope="session")
def demo_ckpt():
    return build_demo_checkpoint(seed=7)

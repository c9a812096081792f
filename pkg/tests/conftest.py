"""Shared fixtures; forces single-threaded numerics for reproducibility."""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

try:
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=1)
except ImportError:  # pragma: no cover
    pass

from amvc import DomainSpec, Manifest, default_classes, generate_dataset  # noqa: E402


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> tuple[Manifest, Manifest]:
    """Six clips per class per domain at gamma=0.8; shared across tests."""
    root = tmp_path_factory.mktemp("data")
    classes = default_classes()
    src = generate_dataset(DomainSpec.make("source", 0.8), classes, 6, 11, root / "source")
    tgt = generate_dataset(DomainSpec.make("target", 0.8), classes, 6, 22, root / "target")
    return src, tgt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# encoder/U-Net geometry small enough for per-test training steps
TINY_MODEL_KW = dict(
    embed_dim=16,
    depth=1,
    heads=2,
    mlp_ratio=2,
    tubelet_frames=4,
    tubelet_size=8,
    d_hidden=16,
    unet_depth=3,
    unet_base_channels=2,
)


@pytest.fixture
def tiny_model_kw():
    return dict(TINY_MODEL_KW)

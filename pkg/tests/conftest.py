import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to Python path
project_root = str(Path(__file__).parent.parent)
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from src.core.set_classifier import SetClassifierConfig, SetClassifierModel  # noqa: E402
from src.core.synthdata import SynthConfig  # noqa: E402

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return SetClassifierConfig(input_dim=6, model_dim=16, heads=4, encoder_layers=2, num_classes=5)


@pytest.fixture
def small_model(small_config):
    return SetClassifierModel(small_config, seed=3)


@pytest.fixture(scope="module")
def fixture_pool():
    from src.utils.roi_io import load_pool

    return load_pool(DATA_DIR / "fixture_pool.jsonl")


@pytest.fixture
def tiny_synth():
    """Small, fast synthetic split: 6 classes, 60 instances, 6 views."""
    return SynthConfig(
        num_classes=6,
        feature_dim=8,
        zipf_exponent=1.0,
        total_instances=60,
        views_per_instance=6,
        test_instances_per_class=2,
        seed=5,
    )


import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ka.data import make_synthetic_pair


@pytest.fixture(scope="session")
def synth_pair():
    """Small fixed dataset pair shared by tests that just need real data."""
    return make_synthetic_pair(num_ids=5, num_attributes=4, samples_per_dataset=60,
                               image_size=(32, 16), seed=123)

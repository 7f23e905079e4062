"""
Shared fixtures: a small three-task suite, published-table fixtures and golden values
"""

import json
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from php_av.tasks.synthetic_av_tasks import TaskSpec
from php_av.model.frozen_dual_encoder import EncoderConfig
from php_av.engine.config import ExperimentConfig, TrainConfig, PromptConfig
from php_av.utils import derive_seed

FIXTURES = ROOT / "fixtures" / "published_tables"
GOLDEN = Path(__file__).resolve().parent / "golden"


def small_tasks(seed=0):
    common = dict(clips_train=24, clips_val=6, clips_test=12, time_steps=2,
                  video_grid=(2, 2), audio_grid=(2, 2), base_channels=4, noise_sigma=0.5)
    return [
        TaskSpec("AVE", "single_label_temporal", num_classes=3, seed=derive_seed(seed, "AVE"), **common),
        TaskSpec("AVVP", "multi_label", num_classes=3, max_active=2, seed=derive_seed(seed, "AVVP"), **common),
        TaskSpec("AVQA", "qa_style", num_classes=4, num_questions=2, seed=derive_seed(seed, "AVQA"), **common),
    ]


def small_config(orders=None, **train):
    train = {"batch_size": 6, "epochs_per_task": 2, **train}
    config = ExperimentConfig(
        tasks=small_tasks(),
        orders=orders or [],
        train=TrainConfig(**train),
        encoder=EncoderConfig(model_dim=8, heads=2),
        prompts=PromptConfig(pool_size=4, generated_length=2, deep_length=2),
    )
    return config.validate()


@pytest.fixture
def config():
    return small_config()


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


def pytest_addoption(parser):
    parser.addoption("--record-golden", action="store_true", default=False,
                     help="Write tests/golden/<name>.json from this run instead of comparing")


@pytest.fixture
def golden(request):
    """
    Compare against the committed tests/golden/<name>.json

    A missing file fails; `pytest --record-golden` rewrites the files from
    the current run.
    """
    record = request.config.getoption("--record-golden", default=False)

    def check(name, value, tol=1e-9):
        path = GOLDEN / f"{name}.json"
        if record:
            GOLDEN.mkdir(exist_ok=True)
            path.write_text(json.dumps({"value": value}, indent=2) + "\n")
            return value
        if not path.exists():
            pytest.fail(f"No golden value {path}; record it with --record-golden")
        expected = json.loads(path.read_text())["value"]
        assert abs(value - expected) <= tol, f"{name}: {value} != golden {expected}"
        return expected
    return check

import numpy as np
import pytest

from fairvit import ModelConfig, SyntheticSpec, generate


def tiny_config(variant="fair_hybrid", **kw) -> ModelConfig:
    base = dict(variant=variant, image_size=8, channels=3, cnn_channels=(3, 4), d_cnn=4, patch=4, d_vit=4,
                vit_depth=1, heads=2, vit_mlp_ratio=2, head_hidden=5, hidden_layer_count=2, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config


@pytest.fixture(scope="session")
def small_dataset():
    return generate(SyntheticSpec(n=40, image_size=8, group_offset=0.5, seed=5))


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    images = rng.uniform(0, 1, (5, 3, 8, 8))
    scores = rng.uniform(1, 5, 5)
    attrs = np.array([0, 1, 0, 1, 1])
    return images, scores, attrs


# PASS/FAIL lines appended by the acceptance suite, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

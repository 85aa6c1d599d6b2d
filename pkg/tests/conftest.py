import json

import pytest

from tests.fixtures import write_fixture


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    """16 images (4 per class), 128 x 128, plus a normalization reference image."""
    root = tmp_path_factory.mktemp("fixture")
    images = write_fixture(root, per_class=4, size=128)
    config = {
        "input_dir": str(images),
        "target_image": str(root / "reference.png"),
        "patch_size": 64,
        "overlap": 0.5,
        "ratios": [0.5, 0.25, 0.25],
        "seed": 1,
        "input_size": 32,
        "widths": [8],
        "lr": 0.01,
        "epochs": 10,
    }
    config_path = root / "pipeline.json"
    config_path.write_text(json.dumps(config, indent=2))
    return {"root": root, "images": images, "config": config_path}


def pytest_terminal_summary(terminalreporter):
    from tests.acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)

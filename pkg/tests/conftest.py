import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from oracles import synthetic_image  # noqa: E402
from surge.data import Image, save_image  # noqa: E402
from surge.discriminator import DiscriminatorConfig  # noqa: E402
from surge.generator import GeneratorConfig  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

TINY_G = dict(n_g=1, ch0=4, ch1=8)
TINY_D = dict(stem_filters=4, block_filters=(4, 4, 8, 8), dense_hidden=8)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_g_config():
    return GeneratorConfig(**TINY_G)


@pytest.fixture
def tiny_d_config():
    return DiscriminatorConfig(**TINY_D)


@pytest.fixture
def synthetic_images():
    return [Image(synthetic_image(i, 80, 88), source_id=f"synth{i}") for i in range(4)]


@pytest.fixture
def image_dir(tmp_path):
    root = tmp_path / "images"
    root.mkdir()
    for i in range(4):
        save_image(synthetic_image(i, 80, 88), root / f"img{i}.png")
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance criterion reporting ----------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        number, title = marker.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if detail:
            title = f"{title} [{detail}]"
        _CRITERIA[number] = (title, report.passed)
        print(f"\n{'PASS' if report.passed else 'FAIL'} criterion {number}: {title}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {title}")

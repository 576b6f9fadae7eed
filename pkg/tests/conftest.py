import numpy as np
import pytest

from umfa import imageio
from umfa.tensor import Tensor
from umfa.vgg import LossNetwork


def synth(size, kind):
    """Smooth deterministic test pictures: a 'content' scene and a striped 'style' swatch."""
    y, x = np.mgrid[0:size, 0:size] / (size - 1)
    if kind == "content":
        r = 0.5 + 0.4 * np.sin(6 * x) * np.cos(4 * y)
        g = np.where((x - 0.5) ** 2 + (y - 0.5) ** 2 < 0.08, 0.9, 0.2)
        b = 0.3 + 0.5 * y
    else:
        r = 0.8 - 0.5 * x
        g = 0.4 + 0.3 * np.sin(10 * (x + y))
        b = np.where((np.floor(x * 4) + np.floor(y * 4)) % 2 == 0, 0.85, 0.15)
    return Tensor(np.stack([r, g, b])[None])


# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")


@pytest.fixture(scope="session")
def phi():
    return LossNetwork.random(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def image_dir(tmp_path):
    """Four small PNG/PPM images (two of each kind) in a fresh directory."""
    d = tmp_path / "data"
    d.mkdir()
    for i, kind in enumerate(["content", "style", "content", "style"]):
        img = synth(40 + 8 * i, kind)
        if i % 2:
            img = Tensor(1.0 - img.data)
        imageio.save_image(img, d / f"img{i}.{'png' if i < 2 else 'ppm'}")
    return d

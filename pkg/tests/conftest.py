import sys

import numpy as np
import pytest

from omnisource.core import FeaturizerConfig, LabelSpace, Manifest, Sample, featurize_manifest


def blob_frame(x, y, size=16, sigma=2.0, amp=0.8, channels=1):
    yy, xx = np.mgrid[0:size, 0:size]
    img = 0.1 + amp * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma**2))
    return np.repeat(np.clip(img, 0, 1)[:, :, None], channels, axis=2)


def two_blob_target(n=200, seed=0, size=16, role="target"):
    """Two linearly separable classes: blob on the left vs on the right."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        c = i % 2
        x = (4 if c == 0 else 11) + rng.normal(0, 0.5)
        f = np.clip(blob_frame(x, 8 + rng.normal(0, 0.5), size) + rng.normal(0, 0.02, (size, size, 1)), 0, 1)
        samples.append(Sample(f"s{i:04d}", "trimmed", (f,), label=c))
    return featurize_manifest(Manifest(role, LabelSpace(("left", "right")), samples), FeaturizerConfig())


@pytest.fixture
def blobs():
    return two_blob_target()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sef import data, nn

settings.register_profile("sef", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sef")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_spec(**kw):
    base = dict(class_count=4, parts_per_image=2, alphabet_size=2, image_size=16, jitter=1,
                noise_sigma=4.0, train_per_class=8, test_per_class=4, glyph_scale=1,
                val_fraction=0.25)
    base.update(kw)
    return data.SynthSpec(**base)


@pytest.fixture(scope="session")
def tiny_sets():
    return data.generate(tiny_spec())


def tiny_model(classes=4, channels=8, groups=2, seed=0):
    return nn.SefModel.build(classes, channels=channels, groups=groups, stages=(4,), seed=seed)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

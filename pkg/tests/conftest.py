import numpy as np
import pytest

from sdcnet import data


@pytest.fixture(scope="session")
def small_scene():
    cfg = data.SceneConfig(height=48, width=64, mode=data.DISPARITY, amplitude=6)
    return data.gen_synthetic_scene(cfg, seed=11)


@pytest.fixture(scope="session")
def small_flow_scene():
    cfg = data.SceneConfig(height=48, width=64, mode=data.FLOW, amplitude=6)
    return data.gen_synthetic_scene(cfg, seed=12)


@pytest.fixture(scope="session")
def tiny_triplets(small_scene):
    img1, img2, gt = small_scene
    return data.sample_triplets(img1, img2, gt, 64, 25, np.random.default_rng(0))


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {title}: {detail}")

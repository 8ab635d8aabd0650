import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def default_scene():
    from splat4d.synthetic import SceneSpec, generate

    return generate(SceneSpec(), seed=0)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


TINY_SCENE = dict(n_static=40, n_orbit=10, n_frames=5, width=32, height=32)
TINY_TRAIN = dict(stage1_iters=30, stage2_iters=300, stage3_iters=20, hash_levels=4, log2_hash_size=12,
                  hash_base_resolution=4, hash_finest_resolution=32, decoder_hidden=16,
                  densify_from=10, densify_interval=10, densify_until=25, stage3_densify_until=15,
                  prune_interval=10, eval_interval=10, log_interval=5)


@pytest.fixture(scope="session")
def tiny_scene():
    from splat4d.synthetic import SceneSpec, generate

    return generate(SceneSpec(**TINY_SCENE), seed=0)


ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {name}: {detail}")

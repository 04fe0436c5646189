import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mergelab import Checkpoint

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_checkpoint(seed: int, shapes=None, scale: float = 1.0, metadata=None) -> Checkpoint:
    rng = np.random.default_rng(seed)
    shapes = shapes or {"layer_0.w": (4, 3), "layer_0.b": (3,), "layer_1.w": (3, 2), "layer_1.b": (2,)}
    return Checkpoint({n: scale * rng.standard_normal(s) for n, s in shapes.items()}, metadata)


@pytest.fixture
def ckpt_factory():
    return random_checkpoint


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def report(number: int, ok: bool, detail: str, seconds: float) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'} ({seconds:.1f} s): {detail}"
        lines.append((number, line))
        with capman.global_and_fixture_disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

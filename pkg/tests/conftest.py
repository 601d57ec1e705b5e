import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cardioguard import criteria, datagen, vae  # noqa: E402
from cardioguard.grid import register  # noqa: E402

SMALL_ARCH = vae.Architecture(view="sa", canvas=32, widths=(8, 16, 32, 32))


@pytest.fixture(scope="session")
def small_sa():
    """A 32 px short-axis model good enough to decode mostly valid shapes (about 15 s to train)."""
    data = datagen.generate("sa", 48, seed=41, size=32)
    model = vae.train(data, vae.TrainConfig(epochs=60, batch_size=8, seed=0), arch=SMALL_ARCH)
    maps = [m for m, _ in data]
    th = criteria.calibrate_thresholds(maps + [register(m)[0] for m in maps])
    return model, data, th


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])

import importlib.util
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hyperaug.autodiff import precision

settings.register_profile(
    "repo",
    deadline=None,
    max_examples=30,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")


@pytest.fixture
def f64():
    with precision("float64"):
        yield


def mnist_csv_path() -> Path | None:
    """The 5000-digit MNIST sample shipped inside the mlxtend wheel, if installed."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        return None
    path = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    return path if path.exists() else None


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    from hyperaug.data import idx_from_csv

    csv = mnist_csv_path()
    if csv is None:
        pytest.skip("mlxtend MNIST sample not installed")
    return idx_from_csv(csv, tmp_path_factory.mktemp("mnist"))



_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Collects one ``PASS``/``FAIL`` line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number: int, ok: bool, detail: str):
        lines.append((number, f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"))
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

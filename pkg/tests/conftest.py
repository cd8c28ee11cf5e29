import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mosfuse.config import load_config  # noqa: E402
from mosfuse.ingest import ingest  # noqa: E402
from mosfuse.synthetic import make_corpus, smoke_config  # noqa: E402


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Synthetic 32-utterance training corpus and a 16-utterance test corpus."""
    root = tmp_path_factory.mktemp("corpus")
    train = make_corpus(root / "train", seed=0)
    test = make_corpus(root / "test", seed=1, utts_per_system=2)
    return train, test


@pytest.fixture(scope="session")
def manifest(corpus):
    m, _, _ = ingest(corpus[0], "ratings-csv", "")
    return m


@pytest.fixture
def smoke_cfg(corpus, tmp_path):
    return load_config(data=smoke_config(corpus[0], corpus[1], tmp_path / "run"))


@pytest.fixture
def tiny_cfg():
    """Smoke model/audio settings without datasets, for building models directly."""
    data = smoke_config(".")
    data.pop("datasets")
    return load_config(data=data)


def env_path(name):
    value = os.environ.get(name)
    return Path(value) if value else None


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title, budget_s):`` records PASS/FAIL (and elapsed time) for the summary."""
    import contextlib
    import time

    @contextlib.contextmanager
    def run(number, title, budget_s=None):
        start = time.perf_counter()
        try:
            yield
            elapsed = time.perf_counter() - start
            if budget_s is not None:
                assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
        except pytest.skip.Exception as exc:
            ACCEPTANCE[number] = ("SKIP", title, str(exc))
            raise
        except BaseException as exc:
            ACCEPTANCE[number] = ("FAIL", title, f"{type(exc).__name__}: {exc}".splitlines()[0])
            raise
        ACCEPTANCE[number] = ("PASS", title, f"{time.perf_counter() - start:.2f}s")

    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE, key=lambda k: (int(str(k).split("-")[0]), str(k))):
        status, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} criterion {number}: {title} ({detail})")

import numpy as np
import pytest

from dfcompress import checkpoint
from dfcompress.trainer import pretrain_teacher


@pytest.fixture(scope="session")
def teacher():
    net, acc = pretrain_teacher(seed=0, steps=800)
    net.accuracy = acc
    return net


@pytest.fixture(scope="session")
def teacher_ckpt(teacher, tmp_path_factory):
    path = tmp_path_factory.mktemp("teacher") / "teacher.ckpt"
    checkpoint.save(teacher, str(path))
    return str(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(key, title, passed, detail)."""
    def record(key, title, passed, detail=""):
        _CRITERIA[key] = (title, bool(passed), detail)
        print(f"[{key}] {title}: {'PASS' if passed else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance")
    for key in sorted(_CRITERIA, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        title, ok, detail = _CRITERIA[key]
        terminalreporter.write_line(f"[{key:>3}] {'PASS' if ok else 'FAIL'}  {title}  {detail}")

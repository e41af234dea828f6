import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hbenhance.task_head import pretrain_for_dataset, write_toy_dataset  # noqa: E402
from hbenhance.trainer import load_pairs  # noqa: E402
from hbenhance.weather import SynthConfig, build_paired_dataset  # noqa: E402


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    return write_toy_dataset(tmp_path_factory.mktemp("toy"), n_train=200, n_test=50, size=64, seed=0)


@pytest.fixture(scope="session")
def toy_manifest(toy_root, tmp_path_factory):
    return build_paired_dataset(toy_root, tmp_path_factory.mktemp("synth"), SynthConfig(), seed=0)


@pytest.fixture(scope="session")
def toy_head(toy_root, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("head") / "head.ckpt"
    head = pretrain_for_dataset(toy_root, seed=0, steps=2000, scenes=2000, threshold=0.95, checkpoint=ckpt)
    head.checkpoint_path = ckpt
    return head


@pytest.fixture(scope="session")
def small_pairs(toy_manifest):
    """Sixteen training pairs (four clean scenes), enough for quick trainer checks."""
    return load_pairs(toy_manifest.split("train")[:16])


@pytest.fixture(scope="session")
def test_pairs(toy_manifest):
    return load_pairs(toy_manifest.split("test"))


ACCEPTANCE = {}


def record_acceptance(number, title, ok, detail):
    ACCEPTANCE[number] = (title, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")

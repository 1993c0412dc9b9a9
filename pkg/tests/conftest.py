from __future__ import annotations

import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from qforget.ingest import read_dump  # noqa: E402
from qforget.store import SnapshotStore  # noqa: E402
from qforget.synthgen import SynthConfig, build_world, dump_directory, generate  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


class Corpus:
    """A generated synthetic corpus ingested into a store."""

    def __init__(self, root: Path, config: SynthConfig):
        self.root = root
        self.config = config
        self.dumps_dir = root / "corpus"
        self.manifest = generate(config, self.dumps_dir)
        self.store_path = root / "store"
        self.store = SnapshotStore(self.store_path)
        for t in config.times():
            d = dump_directory(self.dumps_dir, t)
            snap, _ = read_dump(d / "Posts.xml", d / "Users.xml", d / "Tags.xml", t, strict=True)
            self.store.write(snap)
        self.times = config.times()
        self._world = None

    @property
    def world(self):
        if self._world is None:
            self._world = build_world(self.config)
        return self._world


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> Corpus:
    """Five quarterly dumps, 900 questions, a tenth of them posted between dumps."""
    cfg = SynthConfig(
        n_questions=900, n_users=120, n_tags=12, seed=11, late_question_fraction=0.1,
        dump_times=("2019-03-01", "2019-06-01", "2019-09-01", "2019-12-01", "2020-03-01"),
    )
    return Corpus(tmp_path_factory.mktemp("small_corpus"), cfg)


PLANTED = dict(n_questions=6000, n_users=1500, n_tags=24, seed=7, signal_strength=1.0,
               dump_times=("2019-03-01", "2019-09-01", "2020-03-01"))


@pytest.fixture(scope="session")
def planted_corpus(tmp_path_factory) -> Corpus:
    """6000 questions over three half-yearly dumps with the forgetting signal fully planted."""
    return Corpus(tmp_path_factory.mktemp("planted_corpus"), SynthConfig(**PLANTED))

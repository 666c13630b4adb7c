import os

import pytest

from ctlin.ir import parse_module
from ctlin.pipeline import PipelineConfig, harden_module

CORPUS = os.path.join(os.path.dirname(__file__), "corpus")

# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def corpus_path(name: str) -> str:
    return os.path.join(CORPUS, name + ".ir")


def corpus_src(name: str) -> str:
    with open(corpus_path(name)) as f:
        return f.read()


def load(name: str):
    return parse_module(corpus_src(name))


_harden_cache = {}


def hardened(name: str, **kw):
    """Harden a corpus program, memoized on (name, config)."""
    key = (name, tuple(sorted(kw.items())))
    if key not in _harden_cache:
        hm, rep = harden_module(load(name), PipelineConfig(**kw))
        _harden_cache[key] = (hm, rep)
    return _harden_cache[key]


@pytest.fixture
def corpus_names():
    return sorted(n[:-3] for n in os.listdir(CORPUS) if n.endswith(".ir"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

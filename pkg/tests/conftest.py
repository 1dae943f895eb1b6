"""Shared fixtures.

The toy model (d=32, LogExp corpus, at most 9 tokens, 2 variables, 2000
entries) is trained once per session, which takes several minutes on one
core. Set ``LATENTSR_TOY_CHECKPOINT`` to a path to reuse a checkpoint across
sessions; the file is written on the first run.
"""

import os
import time
from dataclasses import dataclass

import pytest

from latentsr import cvae
from latentsr.checkpoint import load_checkpoint, save_checkpoint
from latentsr.datagen import GenConfig, iter_corpus

TOY_GEN = GenConfig(max_tokens=9, max_vars=2, m=32, seed=0)
TOY_TRAIN = cvae.TrainConfig(batch_size=32, epochs=12, steps_per_epoch=250, base_lr=0.03, warmup=250, seed=0)


@dataclass
class ToyRun:
    model: cvae.ModelParams
    untrained: cvae.ModelParams
    entries: list
    log: list
    seconds: float


@pytest.fixture(scope="session")
def toy_corpus():
    return list(iter_corpus(TOY_GEN, 2000))


@pytest.fixture(scope="session")
def toy(toy_corpus):
    mc = cvae.ModelConfig(pad_len=cvae.pad_len_for([e.expr for e in toy_corpus]), max_vars=2)
    untrained = cvae.init_params(mc, TOY_TRAIN.seed)
    cache = os.environ.get("LATENTSR_TOY_CHECKPOINT")
    if cache and os.path.exists(cache):
        ck = load_checkpoint(cache)
        return ToyRun(ck.params, untrained, toy_corpus, [tuple(r) for r in ck.extra["log"]], ck.extra["seconds"])
    t0 = time.perf_counter()
    params, adam, log = cvae.train(toy_corpus, mc, TOY_TRAIN)
    seconds = time.perf_counter() - t0
    if cache:
        save_checkpoint(cache, params, adam, TOY_TRAIN, extra={"log": [list(r) for r in log], "seconds": seconds})
    return ToyRun(params, untrained, toy_corpus, log, seconds)


_CRITERIA_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA_KEY] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one PASS/FAIL line and asserts ``ok``."""
    lines = request.config.stash[_CRITERIA_KEY]

    def report(n, ok, detail=""):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)

import time
from dataclasses import dataclass
from typing import List

import pytest
import torch

from dpcc.codec.networks import CodecModel
from dpcc.codec.training import LossTerms, make_pairs, train
from dpcc.config import Config, toy_config
from dpcc.synthetic import translating_sequences


@dataclass
class TrainedToy:
    model: CodecModel
    cfg: Config
    history: List[LossTerms]
    seconds: float


@pytest.fixture(scope="session")
def trained_toy() -> TrainedToy:
    """Toy model trained once per session on rigid shapes moving 1-2 voxels per frame.

    Whole-frame pairs are mixed 1:4 with pairs of 8 kd-tree blocks, so the
    model has seen cut shapes before it is asked to code blocks.
    """
    cfg = toy_config()
    pairs = []
    for seq in translating_sequences(16, 9, cfg.depth, seed=100):
        pairs += 2 * make_pairs(seq) + make_pairs(seq, 8)
    torch.manual_seed(0)
    model = CodecModel(cfg)
    start = time.perf_counter()
    history = train(model, pairs, cfg.steps)
    return TrainedToy(model, cfg, history, time.perf_counter() - start)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.name.startswith("test_criterion_") and (report.when == "call" or report.failed):
        detail = dict(item.user_properties).get("detail", "")
        if not detail and report.failed:
            detail = f"error in {report.when}"
        item.config.stash.setdefault(_ACCEPTANCE, []).append((item.name, report.passed, detail))


def pytest_terminal_summary(terminalreporter, config):
    rows = config.stash.get(_ACCEPTANCE, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in rows:
        number, _, title = name.removeprefix("test_criterion_").partition("_")
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{verdict} {int(number):2d} {title.replace('_', ' ')}: {detail}")

import functools

import pytest

from shepherd.corpus import generate, spec_for_index
from shepherd.emulator.sandbox import ProgramInputs, baseline_runs
from shepherd.pe import parse_pe
from shepherd.rewriter import rewrite_image


@functools.lru_cache(maxsize=None)
def corpus_item(index: int):
    return generate(spec_for_index(index))


@functools.lru_cache(maxsize=None)
def rewritten_item(index: int):
    return rewrite_image(parse_pe(corpus_item(index).image))


@functools.lru_cache(maxsize=None)
def baseline_item(index: int):
    g = corpus_item(index)
    inputs = ProgramInputs.from_json(g.ground_truth)
    return inputs, baseline_runs(parse_pe(g.image), inputs)


@pytest.fixture(scope="session")
def corpus():
    return corpus_item


@pytest.fixture(scope="session")
def rewritten():
    return rewritten_item


@pytest.fixture(scope="session")
def baseline():
    return baseline_item


ACCEPTANCE_TITLES = {
    1: "round-trip fidelity",
    2: "behavioural equivalence",
    3: "size-growth envelope",
    4: "attack detection",
    5: "policy oracle equivalence",
    6: "patch-safety rules",
    7: "rebase invariance",
    8: "one-shot configuration and query filter",
    9: "throughput",
}


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in ACCEPTANCE_TITLES.items():
        if number not in RESULTS:
            terminalreporter.write_line(f"criterion {number} ({title}): FAIL - did not complete")
            continue
        ok, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'} - {detail}")

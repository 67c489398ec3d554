import numpy as np
import pytest

from gapolab.policy import TabularPolicy
from gapolab.task_gen import ANSWER_CLOSE, ANSWER_OPEN, Mode, PromptSpec, Vocabulary


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def list_prompt(vocab, category="animals", n=4, template_id=0):
    return PromptSpec(template_id, category, vocab.category_items[category][:n], Mode.LIST_SELECTION)


def forced_tabular(vocab, prompts, weights=None, big=50.0):
    """Tabular policy that emits [OPEN, v, CLOSE] with v drawn from ``weights`` over each prompt's items.

    ``weights`` maps a prompt to unnormalized log-weights per item; uniform by default.
    """
    pol = TabularPolicy.init(vocab, prompts, 4)
    t = pol.arrays["table"]
    for p in prompts:
        row = pol.row_of(pol.context(p))
        t[row, :, :] = -big
        t[row, 0, ANSWER_OPEN] = big
        w = np.zeros(len(p.items)) if weights is None else np.asarray(weights(p), dtype=float)
        t[row, 1, list(p.items)] = big + w
        t[row, 2, ANSWER_CLOSE] = big
    return pol


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line (printed in the terminal summary) and return the boolean."""
    def record(criterion: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1:s.index(":")])):
            terminalreporter.write_line(line)

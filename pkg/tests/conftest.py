import json

import numpy as np
import pytest

from inquire.corpus import CaseRecord, Round, Utterance
from inquire.hyperbolic import PoincareConfig, train_embeddings
from inquire.taxonomy import ActionTree, builtin_tree


def small_tree() -> ActionTree:
    """2 level-1 acts, each with 2 subtypes, each with 2 leaves (14 nodes)."""
    rows = [(0, 1, "R0", None), (1, 1, "R1", None)]
    for r in range(2):
        for c in range(2):
            rows.append((len(rows), 2, f"R{r}C{c}", r))
    for r in range(2):
        for c in range(2):
            for leaf in range(2):
                rows.append((len(rows), 3, f"R{r}C{c}L{leaf}", 2 + 2 * r + c))
    return ActionTree.from_rows(rows)


@pytest.fixture(scope="session")
def tree():
    return builtin_tree()


@pytest.fixture(scope="session")
def table(tree):
    return train_embeddings(tree, PoincareConfig(epochs=30))


@pytest.fixture(scope="session")
def tiny_tree():
    return small_tree()


@pytest.fixture(scope="session")
def tiny_table(tiny_tree):
    return train_embeddings(tiny_tree, PoincareConfig(epochs=30))


def fixture_cases() -> list[CaseRecord]:
    q = ("Question", "Clarification question", "Clarify important aspect of the case")
    h = ("Make hypothesis", "Present hypothesis", "Present hypothetical situations to test legal limits")
    d = ("Declaration", "Rejection", "Oppose the attorney's arguments")
    return [
        CaseRecord(
            case_id="c1",
            background="the city fined a street vendor",
            argued_question="does the permit rule violate due process",
            sub_conclusions=["the permit rule is vague", "the fine was imposed without notice"],
            topics=["permit rule", "notice", "vendor rights"],
            rounds=[
                Round(Utterance("justice", "what does the permit rule require?"),
                      Utterance("attorney", "it requires a permit for any street sale"),
                      appraisal="Sense ambiguity", action_path=q),
                Round(Utterance("justice", "what if the vendor sold only once?"),
                      Utterance("attorney", "even one sale would need a permit"),
                      appraisal="Dive deeper", action_path=h),
            ]),
        CaseRecord(
            case_id="c2",
            background="a tenant was evicted",
            argued_question="was the eviction notice adequate",
            sub_conclusions=["the notice period was too short"],
            topics=["notice period"],
            rounds=[
                Round(Utterance("justice", "I don't think the notice was adequate."),
                      Utterance("attorney", "the statute sets ten days and ten days were given"),
                      action_path=d),
            ]),
    ]


@pytest.fixture
def cases():
    return fixture_cases()


@pytest.fixture
def corpus_file(tmp_path):
    from inquire.corpus import write_corpus

    path = tmp_path / "corpus.jsonl"
    write_corpus(fixture_cases(), path)
    return path


def write_config(path, **values) -> str:
    path.write_text(json.dumps(values))
    return str(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])

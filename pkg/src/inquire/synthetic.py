"""Seeded synthetic corpora whose turn reward is a known table over (appraisal, act).

Texts are random pseudo-words, appraisals and act paths are drawn uniformly
(the behaviour policy), and each round carries its reward explicitly so the
reward engine is bypassed. Useful for end-to-end checks where the optimal
policy is known in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import CaseRecord, Round, Utterance
from .taxonomy import APPRAISAL_LABELS, N_APPRAISALS, ActionTree, builtin_tree


@dataclass
class SyntheticSpec:
    n_cases: int = 200
    min_rounds: int = 3
    max_rounds: int = 7
    vocab: int = 300
    min_len: int = 4
    max_len: int = 14
    seed: int = 0


def reward_table(tree: ActionTree, seed: int = 0) -> np.ndarray:
    """(9, n_nodes) table: appraisal bonus in [0, 0.5) plus leaf value in [0, 1)."""
    rng = np.random.default_rng([seed, 7])
    bonus = rng.uniform(0.0, 0.5, size=N_APPRAISALS)
    value = rng.uniform(0.0, 1.0, size=len(tree))
    return bonus[:, None] + value[None, :]


def best_reward(tree: ActionTree, seed: int = 0) -> float:
    table = reward_table(tree, seed)
    leaves = [p.nodes[-1] for p in tree.full_paths()]
    return float(table[:, leaves].max())


def _sentence(rng, words, lo, hi) -> str:
    n = int(rng.integers(lo, hi + 1))
    return " ".join(words[rng.integers(0, len(words), size=n)])


def make_corpus(spec: SyntheticSpec | None = None, tree: ActionTree | None = None) -> list[CaseRecord]:
    spec = spec or SyntheticSpec()
    tree = tree or builtin_tree()
    rng = np.random.default_rng(spec.seed)
    words = np.array([f"w{i:03d}" for i in range(spec.vocab)])
    table = reward_table(tree, spec.seed)
    paths = tree.full_paths()

    def s() -> str:
        return _sentence(rng, words, spec.min_len, spec.max_len)

    cases = []
    for c in range(spec.n_cases):
        rounds = []
        for _ in range(int(rng.integers(spec.min_rounds, spec.max_rounds + 1))):
            app = int(rng.integers(0, N_APPRAISALS))
            path = paths[int(rng.integers(0, len(paths)))]
            rounds.append(Round(Utterance("justice", s() + " ?"), Utterance("attorney", s()),
                                appraisal=APPRAISAL_LABELS[app],
                                action_path=tuple(path.labels(tree)),
                                reward=float(table[app, path.nodes[-1]])))
        cases.append(CaseRecord(case_id=f"syn-{c:04d}", background=s(), argued_question=s(),
                                sub_conclusions=[s() for _ in range(2)],
                                topics=[s() for _ in range(3)], rounds=rounds))
    return cases


def behaviour_mean_reward(cases: list[CaseRecord]) -> float:
    rewards = [r.reward for c in cases for r in c.rounds]
    return float(np.mean(rewards))

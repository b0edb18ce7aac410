import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inquire.agents import AppraisalAgent, DialogueAgent, QConfig
from inquire.corpus import CaseRecord, Round, Utterance, tokenize
from inquire.hyperbolic import path_features
from inquire.rewards import (RewardEngine, RewardModelConfig, RewardWeights, VocabularyState, aggregate,
                             lexical_similarity, novelty_reward, offline_policy_value, relevance_reward,
                             succinct_reward, tf_cosine, train_reward_model)

word = st.sampled_from([f"t{i}" for i in range(12)])
sentence = st.lists(word, min_size=1, max_size=9).map(" ".join)


def test_relevance_is_max_of_oracle():
    scores = {"c1": 2.0, "c2": 4.5}
    assert relevance_reward("reply", ["c1", "c2"], lambda c, _: scores[c]) == 4.5


def test_relevance_identical_text_is_five():
    assert relevance_reward("the fine was imposed", ["x y", "the fine was imposed"]) == 5.0


def test_relevance_clamped():
    assert relevance_reward("r", ["c"], lambda *_: 7.3) == 5.0
    assert relevance_reward("r", ["c"], lambda *_: -1.0) == 0.0


def test_relevance_needs_conclusions():
    with pytest.raises(ValueError):
        relevance_reward("r", [])


@given(sentence, st.lists(sentence, min_size=1, max_size=5), st.randoms())
def test_relevance_order_invariant(reply, subs, rnd):
    shuffled = list(subs)
    rnd.shuffle(shuffled)
    assert relevance_reward(reply, subs) == relevance_reward(reply, shuffled)


@given(sentence, sentence)
def test_lexical_similarity_bounds(a, b):
    s = lexical_similarity(a, b)
    assert 0.0 <= s <= 5.0
    assert s == pytest.approx(lexical_similarity(b, a))
    assert lexical_similarity(a, a) == pytest.approx(5.0)


def test_tf_cosine_hand_value():
    # tf vectors a=(2,1,0), b=(1,0,1) over (x,y,z): 2 / (sqrt5 * sqrt2)
    assert tf_cosine("x x y", "x z") == pytest.approx(2 / math.sqrt(10))
    assert tf_cosine("", "x") == 0.0


def test_novelty_hand_value():
    vocab = VocabularyState({f"s{i}" for i in range(10)})
    reply = "n1 n2 n3 s0 s1"
    assert novelty_reward(reply, vocab) == pytest.approx(3 / (10 * (1 - 0.9 ** 5)), abs=1e-12)
    assert novelty_reward(reply, vocab) == pytest.approx(0.732584, abs=2e-6)


def test_novelty_zero_cases():
    assert novelty_reward("s0 s1", VocabularyState({"s0", "s1", "s2"})) == 0.0
    assert novelty_reward("w w w", VocabularyState({"w"})) == 0.0


def test_novelty_cold_start_seeds_first_token():
    # V=1 with seen {a}; new tokens {b}; expected = 1 - 0^3 = 1
    assert novelty_reward("a b a", VocabularyState()) == 1.0


def test_novelty_empty_reply():
    with pytest.raises(ValueError):
        novelty_reward("", VocabularyState({"a"}))


def brute_force_novelty(question, turns):
    """Independent EAD: explicit seen list, per-turn recount."""
    seen = []
    for tok in question.lower().split():
        if tok not in seen:
            seen.append(tok)
    out = []
    for justice, reply in turns:
        for tok in justice.lower().split():
            if tok not in seen:
                seen.append(tok)
        toks = reply.lower().split()
        if not seen:
            seen.append(toks[0])
        new = []
        for tok in toks:
            if tok not in seen and tok not in new:
                new.append(tok)
        v = len(seen)
        out.append(len(new) / (v * (1 - ((v - 1) / v) ** len(toks))))
        for tok in toks:
            if tok not in seen:
                seen.append(tok)
    return out


def random_dialogue(rng):
    vocab = [f"w{i}" for i in range(int(rng.integers(5, 40)))]

    def s(lo=1):
        return " ".join(rng.choice(vocab, size=int(rng.integers(lo, 12))))

    turns = [(s(), s()) for _ in range(int(rng.integers(1, 8)))]
    return s(0) if rng.random() < 0.8 else "", turns


def test_ead_matches_brute_force_on_random_dialogues():
    rng = np.random.default_rng(11)
    engine = RewardEngine()
    for _ in range(20):
        question, turns = random_dialogue(rng)
        case = CaseRecord("r", "bg", question, ["c"], [],
                          [Round(Utterance("justice", j), Utterance("attorney", a)) for j, a in turns])
        got = [b.novelty for b in engine.score_case(case)]
        assert np.allclose(got, brute_force_novelty(question, turns), rtol=0, atol=1e-9)


@settings(max_examples=50)
@given(st.lists(st.tuples(sentence, sentence), min_size=1, max_size=6), sentence)
def test_vocabulary_is_union_of_prior_tokens(turns, question):
    engine = RewardEngine()
    case = CaseRecord("r", "bg", question, ["c"], [],
                      [Round(Utterance("justice", j), Utterance("attorney", a)) for j, a in turns])
    vocab = engine.start(case)
    expected = set(tokenize(question))
    for j, a in turns:
        before = vocab.size
        engine.score_turn(vocab, Utterance("justice", j), Utterance("attorney", a), ["c"])
        expected |= set(tokenize(j)) | set(tokenize(a))
        assert vocab.seen == expected
        assert vocab.size >= before


def test_succinctness_values():
    assert succinct_reward("word") == 0.0
    assert succinct_reward(" ".join(["w"] * 10)) == pytest.approx(-2.302585, abs=1e-6)
    assert succinct_reward(" ".join(["w"] * 20)) < succinct_reward(" ".join(["w"] * 5))
    with pytest.raises(ValueError):
        succinct_reward("  ")


def test_aggregate_values():
    assert aggregate(5.0, 0.5, 0.0) == pytest.approx(1.35)
    assert aggregate(0.0, 0.0, 0.0) == 0.0
    assert aggregate(3.0, 9.0, 9.0, RewardWeights(1.0, 0.0, 0.0)) == 3.0
    with pytest.raises(ValueError):
        RewardWeights(-0.1, 0.7, 0.1)


def test_engine_total_is_weighted_sum(cases):
    for b in RewardEngine().score_case(cases[0]):
        assert b.total == pytest.approx(0.2 * b.relevance + 0.7 * b.novelty + 0.1 * b.succinctness)
        assert 0.0 <= b.relevance <= 5.0 and b.novelty >= 0.0 and b.succinctness <= 0.0


# -- reward model -------------------------------------------------------------------------


def linear_dataset(rng, n=400, d=8, feat=6):
    states = rng.normal(size=(n, d))
    apps = rng.integers(0, 9, n)
    feats = rng.normal(size=(n, feat))
    w_s, w_a, w_f = rng.normal(size=d) * 0.3, rng.normal(size=9) * 0.3, rng.normal(size=feat) * 0.3
    r = states @ w_s + w_a[apps] + feats @ w_f
    return states, apps, feats, r


def test_linear_reward_generalizes():
    states, apps, feats, r = linear_dataset(np.random.default_rng(0), n=800)
    _, rep = train_reward_model(states, apps, feats, r,
                                RewardModelConfig(epochs=150, lr_start=3e-3, lr_end=1e-4))
    assert rep.n_heldout == 160
    assert rep.heldout_mse <= 0.05
    assert rep.train_loss[-1] < rep.train_loss[0]


def test_constant_reward_fit(rng):
    # every row is trained on: an interpolating net is only flat on the rows it saw
    states = rng.normal(size=(60, 8))
    apps = rng.integers(0, 9, 60)
    feats = rng.normal(size=(60, 4))
    model, _ = train_reward_model(states, apps, feats, np.ones(60),
                                  RewardModelConfig(epochs=200, lr_start=3e-3, lr_end=1e-4, holdout=0.0))
    assert np.abs(model.predict(states, apps, feats) - 1.0).max() <= 0.05


def test_single_example_memorized(rng):
    model, rep = train_reward_model(rng.normal(size=(1, 8)), [3], rng.normal(size=(1, 4)), [0.7],
                                    RewardModelConfig(epochs=300, lr_start=3e-3, lr_end=1e-4))
    assert rep.n_heldout == 0
    assert rep.heldout_mse <= 1e-6


def test_reward_model_deterministic(rng):
    states, apps, feats, r = linear_dataset(np.random.default_rng(2), n=50)
    cfg = RewardModelConfig(epochs=5)
    a, _ = train_reward_model(states, apps, feats, r, cfg)
    b, _ = train_reward_model(states, apps, feats, r, cfg)
    assert np.array_equal(a.predict(states, apps, feats), b.predict(states, apps, feats))


def test_reward_model_empty():
    with pytest.raises(ValueError):
        train_reward_model(np.zeros((0, 3)), [], np.zeros((0, 2)), [])


def test_offline_value_constant_reward(tiny_tree, tiny_table, rng):
    states = rng.normal(size=(40, 8))
    paths = [p.nodes for p in tiny_tree.full_paths()]
    rows = np.array([paths[i % len(paths)] for i in range(40)])
    apps = rng.integers(0, 9, 40)
    cfg = RewardModelConfig(epochs=200, lr_start=3e-3, lr_end=1e-4, holdout=0.0)
    feats = path_features(tiny_table, rows, 3, cfg.node_ids)
    model, _ = train_reward_model(states, apps, feats, np.full(40, 0.6), cfg)
    app_agent = AppraisalAgent(8, QConfig(seed=1)).eval()
    dia_agent = DialogueAgent(8, tiny_tree, tiny_table, QConfig(seed=2)).eval()
    v1 = offline_policy_value(model, states, app_agent, dia_agent, tiny_table)
    v2 = offline_policy_value(model, states, app_agent, dia_agent, tiny_table)
    assert v1 == v2
    assert v1 == pytest.approx(0.6, abs=0.05)
    with pytest.raises(ValueError):
        offline_policy_value(model, states[:0], app_agent, dia_agent, tiny_table)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import small_tree
from inquire.agents import (AppraisalAgent, DialogueAgent, QConfig, conservative_grad, conservative_reg,
                            ddqn_targets, select_appraisal)
from inquire.hyperbolic import PoincareConfig, train_embeddings
from inquire.taxonomy import ActionTree, Appraisal, TaxonomyError, validate_path
from rl_fixtures import flat_tree

q_rows = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 9)),
                    elements=st.floats(-5, 5))


def flatten_head(agent, bias=None):
    """Make Q independent of the input: zero final weights, chosen final bias."""
    net = agent.head if isinstance(agent, AppraisalAgent) else agent.scorer
    last = len(net.specs) - 1
    net.params[f"{last}.weight"][:] = 0.0
    net.params[f"{last}.bias"][:] = 0.0 if bias is None else bias


# -- pure pieces -------------------------------------------------------------------------------


def test_ddqn_target_hand_value():
    y = ddqn_targets([1.0], 0.9, [[1.0, 2.0]], [[3.0, 0.5]])
    assert y[0] == pytest.approx(1.45)


def test_ddqn_target_gamma_zero_and_terminal():
    assert ddqn_targets([0.3], 0.0, [[1.0, 2.0]], [[3.0, 0.5]])[0] == 0.3
    assert ddqn_targets([0.3], 0.9, [[1.0, 2.0]], [[3.0, 0.5]], terminal=[True])[0] == 0.3


def test_conservative_reg_values():
    assert conservative_reg([1.0, 3.0], 0) == 2.0
    assert conservative_reg([1.0, 3.0], 1) == 0.0


@given(q_rows, st.data())
def test_conservative_reg_nonnegative(q, data):
    obs = np.array(data.draw(st.lists(st.integers(0, q.shape[1] - 1), min_size=len(q), max_size=len(q))))
    assert (conservative_reg(q, obs) >= 0).all()


@given(q_rows)
def test_reg_and_grad_zero_at_argmax(q):
    obs = q.argmax(axis=1)
    assert (conservative_reg(q, obs) == 0).all()
    assert not conservative_grad(q, obs).any()


def test_reg_zero_when_observed_ties_max():
    q = np.array([[2.0, 2.0, 1.0]])
    assert conservative_reg(q, [1])[0] == 0.0
    assert not conservative_grad(q, [1]).any()


def test_conservative_grad_signs():
    g = conservative_grad([[1.0, 3.0, 0.0]], [0])
    assert g.tolist() == [[-1.0, 1.0, 0.0]]


# -- appraisal agent -----------------------------------------------------------------------------


def test_select_appraisal_argmax_and_tie():
    agent = AppraisalAgent(4, QConfig()).eval()
    bias = np.linspace(0.1, 0.5, 9)
    bias[7] = 0.9
    flatten_head(agent, bias)
    assert select_appraisal(agent, np.ones(4)).label == "Dive deeper"
    flatten_head(agent)
    assert select_appraisal(agent, np.ones(4)) == Appraisal(0)


@given(st.floats(-100, 100))
def test_appraisal_argmax_invariant_to_shift(shift):
    agent = AppraisalAgent(4, QConfig(seed=3)).eval()
    states = np.random.default_rng(0).normal(size=(6, 4))
    before = agent.select_batch(states)
    last = f"{len(agent.head.specs) - 1}.bias"
    agent.head.params[last] += shift
    assert np.array_equal(before, agent.select_batch(states))


def test_appraisal_target_standard_and_literal(rng):
    s, s2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    r = rng.normal(size=3)
    agent = AppraisalAgent(4, QConfig(seed=1)).eval()
    y = agent.targets(r, s, s2, np.zeros(3))
    a = agent.q_values(s2).argmax(1)
    assert np.allclose(y, r + 0.9 * agent.q_values(s2, target=True)[np.arange(3), a])
    agent.config.current_state_target = True
    y_lit = agent.targets(r, s, s2, np.zeros(3))
    assert np.allclose(y_lit, r + 0.9 * agent.q_values(s, target=True)[np.arange(3), a])


def test_alpha_zero_is_plain_ddqn(rng):
    agent = AppraisalAgent(4, QConfig(reg=0.0, lr_start=1e-3, lr_end=1e-3))
    rep = agent.train_step(rng.normal(size=(5, 4)), rng.integers(0, 9, 5), rng.normal(size=5),
                           rng.normal(size=(5, 4)), np.zeros(5))
    assert rep.total == rep.td


def test_reg_contributes_nothing_when_data_is_greedy(rng):
    states = rng.normal(size=(6, 4))
    a = AppraisalAgent(4, QConfig(reg=0.5, lr_start=1e-3, lr_end=1e-3, seed=4))
    b = AppraisalAgent(4, QConfig(reg=0.0, lr_start=1e-3, lr_end=1e-3, seed=4))
    # train-mode batch norm differs from eval, so take the argmax from the train-mode forward
    a.compressor.train()
    a.head.train()
    actions = a.head._run(a.compressor._run(states, True, False)[0], True, False)[0].argmax(1)
    args = (states, actions, rng.normal(size=6), rng.normal(size=(6, 4)), np.zeros(6))
    rep = a.train_step(*args)
    b.train_step(*args)
    assert rep.reg == 0.0
    for k, v in a.params().items():
        assert np.array_equal(v, b.params()[k])


def test_loss_decreases_on_fixed_batch(rng):
    agent = AppraisalAgent(6, QConfig(lr_start=1e-3, lr_end=1e-4, lr_horizon=200, tau=0.05))
    batch = (rng.normal(size=(16, 6)), rng.integers(0, 9, 16), rng.normal(size=16),
             rng.normal(size=(16, 6)), rng.random(16) < 0.3)
    losses = [agent.train_step(*batch).total for _ in range(200)]
    assert np.isfinite(losses).all()
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_agent_state_roundtrip(rng):
    agent = AppraisalAgent(4, QConfig(seed=2))
    batch = (rng.normal(size=(8, 4)), rng.integers(0, 9, 8), rng.normal(size=8),
             rng.normal(size=(8, 4)), np.zeros(8))
    agent.train_step(*batch)
    meta, arrays = agent.state()
    twin = AppraisalAgent(4, QConfig(seed=99))
    twin.load_state(meta, arrays)
    ra, rb = agent.train_step(*batch), twin.train_step(*batch)
    assert ra == rb
    assert np.array_equal(agent.rng.random(3), twin.rng.random(3))


# -- dialogue agent -------------------------------------------------------------------------------


def test_level_q_value_counts(tree, table):
    agent = DialogueAgent(16, tree, table).eval()
    s = np.ones(16)
    assert len(agent.level_q_values(s, 0)) == 3
    q = tree.find("Question")
    assert len(agent.level_q_values(s, 0, (q,))) == 3
    assert np.array_equal(agent.level_q_values(s, 4, (q,)), agent.level_q_values(s, 4, (q,)))


def test_level_q_rejects_non_children(tree, table):
    agent = DialogueAgent(16, tree, table).eval()
    present = tree.find("Present hypothesis", tree.find("Make hypothesis"))
    with pytest.raises(TaxonomyError):
        agent.level_q_values(np.ones(16), 0, (tree.find("Question"),), candidates=[present])


def test_builtin_paths_are_full(tree, table, rng):
    agent = DialogueAgent(16, tree, table, QConfig(seed=5)).eval()
    states = rng.normal(size=(30, 16))
    paths = agent.select_paths(states, rng.integers(0, 9, 30))
    assert all(len(p) == 3 and validate_path(tree, p) and p.is_full(tree) for p in paths)
    apps = rng.integers(0, 9, 30)
    paths = agent.select_paths(states, apps)
    assert paths[3] == agent.select_path(states[3], int(apps[3]))


def test_childless_root_stops_early():
    tree = ActionTree.from_rows([(0, 1, "Ask", None), (1, 1, "Tell", None), (2, 2, "Tell more", 1),
                                 (3, 3, "Tell it all", 2)])
    table = train_embeddings(tree, PoincareConfig(epochs=5))
    agent = DialogueAgent(4, tree, table).eval()
    flatten_head(agent)
    # all Q equal: the lowest id, the childless "Ask", wins
    assert agent.select_path(np.ones(4), 0).nodes == (0,)


def test_ties_go_to_lowest_node_id(tiny_tree, tiny_table):
    agent = DialogueAgent(4, tiny_tree, tiny_table).eval()
    flatten_head(agent, 1.0)
    assert agent.select_path(np.ones(4), 0).nodes == (0, 2, 6)


@given(st.floats(-50, 50))
def test_path_selection_invariant_to_shift(shift):
    tree = small_tree()
    table = train_embeddings(tree, PoincareConfig(epochs=5))
    agent = DialogueAgent(4, tree, table, QConfig(seed=6)).eval()
    states = np.random.default_rng(1).normal(size=(5, 4))
    before = agent.select_paths(states, [0, 1, 2, 3, 4])
    agent.scorer.params[f"{len(agent.scorer.specs) - 1}.bias"] += shift
    assert agent.select_paths(states, [0, 1, 2, 3, 4]) == before


def test_dialogue_target_uses_next_turn_level_one(tiny_tree, tiny_table, rng):
    agent = DialogueAgent(4, tiny_tree, tiny_table, QConfig(seed=7)).eval()
    s, s2 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    r = np.array([0.2, -0.1])
    y = agent.targets(r, s, [0, 1], s2, [3, 4], np.array([False, True]))
    main = np.array([agent.level_q_values(x, p) for x, p in zip(s2, [3, 4])])
    # bootstrap only for the live row, valued by the target network at the main argmax
    a = int(main[0].argmax())
    tq = agent._score_grid(s2[:1], [3], np.full((1, 2), -1), target=True)[0, a]
    assert y[0] == pytest.approx(0.2 + 0.9 * tq)
    assert y[1] == -0.1


def test_plain_ddqn_when_coefficients_zero(tiny_tree, tiny_table, rng):
    agent = DialogueAgent(4, tiny_tree, tiny_table, QConfig(reg=0.0, hier=0.0))
    rep = agent.train_step(rng.normal(size=(3, 4)), [0, 1, 2], [[-1, -1], [0, -1], [0, 2]], [1, 3, 7],
                           rng.normal(size=3), rng.normal(size=(3, 4)), [0, 1, 2], np.zeros(3, bool))
    assert rep.total == rep.td


def test_hier_term_zero_for_constant_scorer(tiny_tree, tiny_table, rng):
    agent = DialogueAgent(4, tiny_tree, tiny_table, QConfig(hier=1.0))
    flatten_head(agent, 0.3)
    rep = agent.train_step(rng.normal(size=(3, 4)), [0, 1, 2], [[-1, -1], [0, -1], [0, 2]], [1, 3, 7],
                           rng.normal(size=3), rng.normal(size=(3, 4)), [0, 1, 2], np.zeros(3, bool))
    assert rep.hier == 0.0


def test_invalid_prefix_action_raises(tiny_tree, tiny_table, rng):
    agent = DialogueAgent(4, tiny_tree, tiny_table)
    with pytest.raises(TaxonomyError):
        agent.train_step(rng.normal(size=(1, 4)), [0], [[0, -1]], [4], [0.0], rng.normal(size=(1, 4)), [0],
                         [True])


def test_hierarchy_residuals_nan_for_leaves(tiny_tree, tiny_table, rng):
    agent = DialogueAgent(4, tiny_tree, tiny_table).eval()
    res = agent.hierarchy_residuals(rng.normal(size=(3, 4)), [0, 0, 0], [[-1, -1], [0, -1], [0, 2]], [0, 2, 6])
    assert np.isfinite(res[:2]).all() and np.isnan(res[2])
    s = rng.normal(size=4)
    direct = abs(agent.level_q_values(s, 0)[0] - agent.level_q_values(s, 0, (0,)).max())
    assert agent.hierarchy_residuals(s[None], [0], [[-1, -1]], [0])[0] == pytest.approx(direct)


def test_depth_one_tree_trains():
    tree = flat_tree()
    table = train_embeddings(tree, PoincareConfig(epochs=5))
    agent = DialogueAgent(2, tree, table, QConfig(lr_start=1e-3, lr_end=1e-3))
    rep = agent.train_step(np.eye(2)[[0, 1]], [0, 1], np.zeros((2, 0), int), [0, 2], [1.0, 0.0],
                           np.eye(2)[[1, 0]], [0, 0], [False, True])
    assert np.isfinite(rep.total)
    assert len(agent.eval().select_path(np.ones(2), 0)) == 1


def test_dialogue_state_roundtrip(tiny_tree, tiny_table, rng):
    batch = (rng.normal(size=(3, 4)), [0, 1, 2], [[-1, -1], [0, -1], [0, 2]], [1, 3, 7], rng.normal(size=3),
             rng.normal(size=(3, 4)), [0, 1, 2], np.zeros(3, bool))
    a = DialogueAgent(4, tiny_tree, tiny_table, QConfig(seed=8))
    a.train_step(*batch)
    b = DialogueAgent(4, tiny_tree, tiny_table, QConfig(seed=9))
    b.load_state(*a.state())
    assert a.train_step(*batch) == b.train_step(*batch)


def test_node_ids_widen_scorer(tiny_tree, tiny_table):
    with_ids = DialogueAgent(4, tiny_tree, tiny_table, QConfig(node_ids=True))
    without = DialogueAgent(4, tiny_tree, tiny_table, QConfig(node_ids=False))
    assert with_ids.scorer.in_dim - without.scorer.in_dim == len(tiny_tree)
    assert without.scorer.in_dim == 32 + 9 + 3 * 8 + 8

"""Constructed offline-RL fixtures with known answers, shared by agent and acceptance tests."""

import itertools

import numpy as np

from inquire.agents import AppraisalAgent, DialogueAgent, QConfig
from inquire.hyperbolic import PoincareConfig, train_embeddings
from inquire.nn import ExponentialDecay, Optimizer
from inquire.taxonomy import ActionTree


def value_iteration(transitions, rewards, gamma, iters=2000):
    q = np.zeros_like(rewards)
    for _ in range(iters):
        q = rewards + gamma * q[transitions].max(axis=-1)
    return q


def ddqn_oracle(steps=8000, seed=0):
    """5-state / 2-action deterministic MDP, every (s, a) in the data once.

    Returns (learned Q, optimal Q). States are one-hot.
    """
    rng = np.random.default_rng(seed)
    n_s, n_a, gamma = 5, 2, 0.9
    nxt = rng.integers(0, n_s, (n_s, n_a))
    rew = rng.uniform(0, 1, (n_s, n_a))
    q_star = value_iteration(nxt, rew, gamma)
    eye = np.eye(n_s)
    s = np.repeat(np.arange(n_s), n_a)
    a = np.tile(np.arange(n_a), n_s)
    cfg = QConfig(reg=0.0, gamma=gamma, tau=0.02, lr_start=3e-3, lr_end=1e-5, lr_horizon=steps, seed=seed)
    agent = AppraisalAgent(n_s, cfg, n_actions=n_a)
    for _ in range(steps):
        agent.train_step(eye[s], a, rew[s, a], eye[nxt[s, a]], np.zeros(len(s), bool))
    return agent.eval().q_values(eye), q_star


def appraisal_missing_action(reg, steps=2000):
    """One state, three actions; the data has only actions 0 (r=0.5) and 1 (r=1.0).

    Action 2 starts overestimated by +5 in both main and target heads.
    Returns the greedy action after training.
    """
    states = np.eye(2)[[0] * 4]
    cfg = QConfig(reg=reg, tau=0.02, lr_start=1e-3, lr_end=1e-4, lr_horizon=steps, seed=0)
    agent = AppraisalAgent(2, cfg, n_actions=3)
    last = f"{len(agent.head.specs) - 1}.bias"
    for net in (agent.head, agent.target_head):
        net.params[last][2] += 5.0
    actions = np.array([0, 1, 0, 1])
    rewards = np.array([0.5, 1.0, 0.5, 1.0])
    for _ in range(steps):
        agent.train_step(states, actions, rewards, states, np.ones(4, bool))
    return int(agent.eval().select_batch(states[:1])[0])


def flat_tree(n=3):
    return ActionTree.from_rows([(i, 1, f"act{i}", None) for i in range(n)])


def dialogue_missing_action(reg, steps=2000):
    """Flat 3-act tree. Warm start on data rewarding act 2 with 5.0, then train on acts 0/1 only.

    Returns the greedy path after the second phase.
    """
    tree = flat_tree()
    table = train_embeddings(tree, PoincareConfig(epochs=50))
    states = np.eye(2)[[0] * 4]
    agent = DialogueAgent(2, tree, table, QConfig(reg=0.0, tau=1.0, lr_start=1e-2, lr_end=1e-2,
                                                  lr_horizon=1, seed=0))
    empty = np.zeros((3, 0), dtype=np.int64)
    for _ in range(300):
        agent.train_step(states[:3], [0] * 3, empty, [0, 1, 2], [0.5, 1.0, 5.0], states[:3], [0] * 3,
                         np.ones(3, bool))
    agent.config.reg = reg
    agent.config.tau = 0.02
    agent.optimizer = Optimizer(ExponentialDecay(1e-3, 1e-4, steps))
    empty = np.zeros((4, 0), dtype=np.int64)
    for _ in range(steps):
        agent.train_step(states, [0] * 4, empty, [0, 1, 0, 1], [0.5, 1.0, 0.5, 1.0], states, [0] * 4,
                         np.ones(4, bool))
    return agent.eval().select_path(states[0], 0).nodes


def hierarchical_bandit(tree, repeats=8):
    """Two states, every full path of the 2x2x2 tree; path (c0, l0) under each root is best.

    The best path appears once per state and every other path ``repeats`` times,
    so plain per-level regression pulls parents toward the crowd's mean while
    the consistency term pulls them to the best child.
    """
    data = []
    for s in range(2):
        for r, c, leaf in itertools.product(range(2), range(2), range(2)):
            best = c == 0 and leaf == 0
            reward = (0.4 if best else 0.0) + 0.1 * r + 0.2 * s
            mid = 2 + 2 * r + c
            node = 6 + 4 * r + 2 * c + leaf
            assert tree.node(node).parent == mid and tree.node(mid).parent == r
            for _ in range(1 if best else repeats):
                for prefix, act in (((), r), ((r,), mid), ((r, mid), node)):
                    data.append((s, list(prefix) + [-1] * (2 - len(prefix)), act, reward))
    s, prefix, act, reward = (np.array(x) for x in zip(*data))
    return s, prefix, act, reward


def hierarchy_residual(tree, table, lam, steps=3000):
    s, prefix, act, reward = hierarchical_bandit(tree)
    states = np.eye(4)[:2][s]
    apps = np.zeros(len(s), dtype=np.int64)
    cfg = QConfig(reg=0.0, hier=lam, tau=0.02, lr_start=3e-3, lr_end=1e-4, lr_horizon=steps, seed=0)
    agent = DialogueAgent(4, tree, table, cfg)
    term = np.ones(len(s), bool)
    for _ in range(steps):
        agent.train_step(states, apps, prefix, act, reward, states, apps, term)
    return float(np.nanmax(agent.eval().hierarchy_residuals(states, apps, prefix, act)))

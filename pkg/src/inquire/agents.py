"""Appraisal agent and hierarchical dialogue agent (conservative double DQN).

Both agents compress the raw context embedding with their own dense + batch
norm + leaky-relu layer. The appraisal agent scores all appraisals with a
flat head. The dialogue agent uses one scorer for every level: it rates a
candidate act given the augmented state, the chosen parent acts and the
candidate's Poincare coordinates.

Targets follow double DQN: the main network picks the next action, the target
network values it. The conservative term ``max_a Q(s,a) - Q(s,a_data)``
penalizes preferring actions the dataset never took, and is exactly zero when
the dataset action is already the argmax.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import store
from .hyperbolic import EmbeddingTable
from .nn import ExponentialDecay, Network, Optimizer, polyak_update
from .taxonomy import N_APPRAISALS, ActionPath, ActionTree, Appraisal, TaxonomyError


@dataclass
class QConfig:
    compressed: int = 32
    hidden: tuple[int, ...] = (64, 32)
    head_bn: bool = False
    slope: float = 0.01
    gamma: float = 0.9
    tau: float = 0.005
    reg: float = 0.1          # alpha (appraisal) or beta (dialogue)
    hier: float = 1.0         # lambda, dialogue agent only
    lr_start: float = 1e-6
    lr_end: float = 3e-9
    lr_horizon: int = 10_000
    optimizer: str = "adam"
    max_grad_norm: float | None = None
    current_state_target: bool = False
    node_ids: bool = True  # dialogue agent: append a node one-hot to candidate coords
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "QConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class LossReport:
    total: float
    td: float
    reg: float
    hier: float = 0.0
    extra: dict = field(default_factory=dict)


# -- pure pieces -----------------------------------------------------------------------------


def greedy(q: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(q, axis=-1)


def ddqn_targets(rewards, gamma: float, q_main_next, q_target_next, terminal=None) -> np.ndarray:
    """Y = r + gamma * Q_target(s', argmax_a Q_main(s', a)); Y = r at terminal steps."""
    rewards = np.atleast_1d(np.asarray(rewards, dtype=np.float64))
    q_main_next = np.atleast_2d(q_main_next)
    q_target_next = np.atleast_2d(q_target_next)
    a = greedy(q_main_next)
    boot = q_target_next[np.arange(len(a)), a]
    live = 1.0 if terminal is None else 1.0 - np.atleast_1d(np.asarray(terminal, dtype=np.float64))
    return rewards + gamma * live * boot


def _reg_argmax(q: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Argmax per row, except that a tie with the observed action resolves to it."""
    best = greedy(q)
    rows = np.arange(len(q))
    tie = q[rows, observed] >= q[rows, best]
    return np.where(tie, observed, best)


def conservative_reg(q_values, observed) -> np.ndarray | float:
    """max_a Q(s, a) - Q(s, a_observed), per row."""
    q = np.asarray(q_values, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    obs = np.atleast_1d(np.asarray(observed, dtype=np.int64))
    rows = np.arange(len(q))
    out = q[rows, _reg_argmax(q, obs)] - q[rows, obs]
    return float(out[0]) if single else out


def conservative_grad(q_values, observed) -> np.ndarray:
    """d(conservative_reg)/dQ: +1 at the argmax, -1 at the observed action, 0 if they coincide."""
    q = np.atleast_2d(np.asarray(q_values, dtype=np.float64))
    obs = np.atleast_1d(np.asarray(observed, dtype=np.int64))
    rows = np.arange(len(q))
    g = np.zeros_like(q)
    best = _reg_argmax(q, obs)
    moved = best != obs
    g[rows[moved], best[moved]] = 1.0
    g[rows[moved], obs[moved]] = -1.0
    return g


# -- shared machinery ----------------------------------------------------------------------


class _QAgent:
    kind = "q"

    def __init__(self, d_raw: int, config: QConfig, rng: np.random.Generator | None):
        self.config = config
        self.d_raw = d_raw
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.compressor = Network.mlp([d_raw, config.compressed], rng=self.rng, out_bn=True,
                                      out_activation="leaky_relu", slope=config.slope)
        self.optimizer = Optimizer(ExponentialDecay(config.lr_start, config.lr_end, config.lr_horizon),
                                   kind=config.optimizer, max_grad_norm=config.max_grad_norm)

    def _nets(self) -> dict[str, Network]:
        raise NotImplementedError

    def _finish_init(self):
        for name, net in list(self._nets().items()):
            setattr(self, f"target_{name}", net.clone())

    def main_target_pairs(self):
        return [(net, getattr(self, f"target_{name}")) for name, net in self._nets().items()]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, net in self._nets().items():
            out.update({f"{name}.{k}": v for k, v in net.params.items()})
        return out

    def _apply(self, grads: dict[str, np.ndarray]) -> None:
        self.optimizer.step(self.params(), grads)
        for main, target in self.main_target_pairs():
            polyak_update(target, main, self.config.tau)

    def eval(self):
        for main, target in self.main_target_pairs():
            main.eval()
            target.eval()
        return self

    def n_params(self) -> int:
        return sum(net.n_params() for net in self._nets().values())

    # checkpoint payload: networks, targets, optimizer, rng
    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {}
        arch = {}
        for name, net in self._nets().items():
            arch[name] = net.describe()
            arrays.update(store.prefixed(f"main/{name}", net.state_arrays()))
            arrays.update(store.prefixed(f"target/{name}",
                                         getattr(self, f"target_{name}").state_arrays()))
        opt_meta, opt_arrays = self.optimizer.state_dict()
        arrays.update(store.prefixed("optimizer", opt_arrays))
        meta = dict(kind=self.kind, d_raw=self.d_raw, config=asdict(self.config),
                    architecture=arch, optimizer=opt_meta, rng=store.rng_state(self.rng))
        return meta, arrays

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        for name, net in self._nets().items():
            if net.describe() != meta["architecture"][name]:
                raise ValueError(f"checkpoint architecture mismatch for {name}")
            net.load_arrays(store.strip_prefix(f"main/{name}", arrays))
            getattr(self, f"target_{name}").load_arrays(store.strip_prefix(f"target/{name}", arrays))
        self.optimizer = Optimizer.from_state(meta["optimizer"], store.strip_prefix("optimizer", arrays))
        self.rng = store.rng_from_state(meta["rng"])


# -- appraisal agent ---------------------------------------------------------------------------


class AppraisalAgent(_QAgent):
    """Flat double-DQN over appraisals (or any small discrete action set)."""

    kind = "appraisal"

    def __init__(self, d_raw: int, config: QConfig | None = None, n_actions: int = N_APPRAISALS,
                 rng: np.random.Generator | None = None):
        config = config or QConfig()
        super().__init__(d_raw, config, rng)
        self.n_actions = n_actions
        self.head = Network.mlp([config.compressed, *config.hidden, n_actions], rng=self.rng,
                                hidden_bn=config.head_bn, slope=config.slope)
        self._finish_init()

    def _nets(self):
        return {"compressor": self.compressor, "head": self.head}

    def q_values(self, states, target: bool = False) -> np.ndarray:
        comp, head = ((self.target_compressor, self.target_head) if target
                      else (self.compressor, self.head))
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return head.predict(comp.predict(states))

    def select_batch(self, states) -> np.ndarray:
        return greedy(self.q_values(states))

    def select(self, state) -> Appraisal | int:
        a = int(self.select_batch(state)[0])
        return Appraisal(a) if self.n_actions == N_APPRAISALS else a

    def targets(self, rewards, states, next_states, terminal) -> np.ndarray:
        q_main_next = self.q_values(next_states)
        q_tgt = self.q_values(states if self.config.current_state_target else next_states, target=True)
        return ddqn_targets(rewards, self.config.gamma, q_main_next, q_tgt, terminal)

    def train_step(self, states, actions, rewards, next_states, terminal) -> LossReport:
        c = self.config
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.int64)
        y = self.targets(rewards, states, next_states, terminal)
        self.compressor.train()
        self.head.train()
        z = self.compressor.forward(states)
        q = self.head.forward(z)
        n = len(actions)
        rows = np.arange(n)
        td = q[rows, actions] - y
        reg = conservative_reg(q, actions)
        td_loss = float(np.mean(td ** 2))
        reg_loss = float(np.mean(reg))
        dq = np.zeros_like(q)
        dq[rows, actions] = 2.0 * td / n
        if c.reg:
            dq += (c.reg / n) * conservative_grad(q, actions)
        gh, dz = self.head.backward(dq)
        gc, _ = self.compressor.backward(dz)
        grads = {f"head.{k}": v for k, v in gh.items()}
        grads.update({f"compressor.{k}": v for k, v in gc.items()})
        self._apply(grads)
        return LossReport(td_loss + c.reg * reg_loss, td_loss, reg_loss)


def select_appraisal(agent: AppraisalAgent, state) -> Appraisal | int:
    return agent.select(state)


# -- hierarchical dialogue agent ----------------------------------------------------------------


class DialogueAgent(_QAgent):
    """One scorer Q(s_aug, parent acts, candidate) shared by all hierarchy levels."""

    kind = "dialogue"

    def __init__(self, d_raw: int, tree: ActionTree, table: EmbeddingTable,
                 config: QConfig | None = None, rng: np.random.Generator | None = None):
        config = config or QConfig(lr_end=1e-8)
        super().__init__(d_raw, config, rng)
        self.tree = tree
        self.table = table
        self.depth = tree.depth
        self.d_h = table.dim
        if len(table.coords) != len(tree):
            raise ValueError("embedding table does not cover the taxonomy")
        n = len(tree)
        self._coords = np.vstack([table.coords, np.zeros((1, self.d_h))])  # row -1 = padding
        # sibling leaves share every relation, so their coordinates nearly coincide; the
        # optional one-hot keeps them distinguishable to the scorer
        ids = np.vstack([np.eye(n), np.zeros((1, n))]) if config.node_ids else np.zeros((n + 1, 0))
        self._cand_feats = np.hstack([self._coords, ids])
        # candidate grid: row i lists children of node i, row n lists the level-1 acts; -1 pads
        width = max([len(tree.roots)] + [len(nd.children) for nd in tree.nodes])
        self._cand_table = np.full((n + 1, width), -1, dtype=np.int64)
        for nd in tree.nodes:
            kids = sorted(nd.children)
            self._cand_table[nd.id, :len(kids)] = kids
        self._cand_table[n, :len(tree.roots)] = sorted(tree.roots)
        in_dim = config.compressed + N_APPRAISALS + self.depth * self.d_h + self._cand_feats.shape[1]
        self.scorer = Network.mlp([in_dim, *config.hidden, 1], rng=self.rng,
                                  hidden_bn=config.head_bn, slope=config.slope)
        self._finish_init()

    def _nets(self):
        return {"compressor": self.compressor, "scorer": self.scorer}

    def candidates(self, prefix) -> np.ndarray:
        last = len(self.tree) if len(prefix) == 0 else int(prefix[-1])
        row = self._cand_table[last]
        return row[row >= 0]

    def _grid(self, prefixes: np.ndarray) -> np.ndarray:
        """Padded candidate ids for each padded prefix row, shape (B, width)."""
        levels = np.sum(prefixes >= 0, axis=1)
        if prefixes.shape[1] == 0:
            return np.tile(self._cand_table[len(self.tree)], (len(prefixes), 1))
        last = np.where(levels == 0, len(self.tree),
                        prefixes[np.arange(len(prefixes)), np.maximum(levels - 1, 0)])
        return self._cand_table[last]

    def _row_inputs(self, z, appraisals, owner, prefixes, cand) -> np.ndarray:
        """One input row per (owner state, padded prefix, candidate act)."""
        onehot = np.eye(N_APPRAISALS)[appraisals[owner]]
        pf = self._coords[prefixes].reshape(len(owner), -1)
        pad = np.zeros((len(owner), self.depth * self.d_h - pf.shape[1]))
        return np.concatenate([z[owner], onehot, pf, pad, self._cand_feats[cand]], axis=1)

    def _grid_rows(self, prefixes):
        grid = self._grid(prefixes)
        valid = grid >= 0
        owner = np.nonzero(valid)[0]
        return grid, valid, owner, prefixes[owner], grid[valid]

    def _score_grid(self, states, appraisals, prefixes, target: bool = False) -> np.ndarray:
        """Q over each prefix's candidate set as a (B, width) grid, -inf where padded."""
        comp, scorer = ((self.target_compressor, self.target_scorer) if target
                        else (self.compressor, self.scorer))
        z = comp.predict(np.atleast_2d(states))
        appraisals = np.atleast_1d(np.asarray(appraisals, dtype=np.int64))
        grid, valid, owner, pref, cand = self._grid_rows(np.asarray(prefixes, dtype=np.int64))
        out = np.full(grid.shape, -np.inf)
        if len(owner):
            out[valid] = scorer.predict(self._row_inputs(z, appraisals, owner, pref, cand))[:, 0]
        return out

    def _pad(self, prefix) -> np.ndarray:
        p = np.full(self.depth - 1, -1, dtype=np.int64)
        p[:len(prefix)] = prefix
        return p

    def augment(self, state, appraisal) -> np.ndarray:
        """concat(compressed state, appraisal one-hot) in eval mode."""
        z = self.compressor.predict(np.atleast_2d(state))[0]
        p = appraisal.index if isinstance(appraisal, Appraisal) else int(appraisal)
        return np.concatenate([z, np.eye(N_APPRAISALS)[p]])

    def level_q_values(self, state, appraisal, prefix=(), candidates=None) -> np.ndarray:
        """Q for each candidate act following ``prefix`` (level-1 acts when empty)."""
        prefix = tuple(int(x) for x in prefix)
        allowed = self.candidates(prefix)
        cands = allowed if candidates is None else np.asarray(candidates, dtype=np.int64)
        bad = set(cands.tolist()) - set(allowed.tolist())
        if bad:
            raise TaxonomyError(f"nodes {sorted(bad)} are not children of prefix {prefix}")
        p = appraisal.index if isinstance(appraisal, Appraisal) else int(appraisal)
        z = self.compressor.predict(np.atleast_2d(state))
        n = len(cands)
        x = self._row_inputs(z, np.array([p]), np.zeros(n, dtype=np.int64),
                             np.tile(self._pad(prefix), (n, 1)), cands)
        return self.scorer.predict(x)[:, 0]

    def select_paths(self, states, appraisals) -> list[ActionPath]:
        """Greedy level-wise descent; stops where the chosen act has no children."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        appraisals = np.array([a.index if isinstance(a, Appraisal) else int(a)
                               for a in np.atleast_1d(appraisals)], dtype=np.int64)
        b = len(states)
        prefixes = np.full((b, self.depth), -1, dtype=np.int64)
        active = np.ones(b, dtype=bool)
        for level in range(self.depth):
            q = self._score_grid(states, appraisals, prefixes[:, :self.depth - 1])
            has = np.isfinite(q).any(axis=1) & active
            if not has.any():
                break
            grid = self._grid(prefixes[:, :self.depth - 1])
            # grid rows are sorted ascending, so argmax's first hit is the lowest node id
            choice = grid[np.arange(b), np.argmax(q, axis=1)]
            prefixes[has, level] = choice[has]
            active = has
            if level == self.depth - 1:
                break
        return [ActionPath(tuple(int(x) for x in row if x >= 0)) for row in prefixes]

    def select_path(self, state, appraisal) -> ActionPath:
        return self.select_paths(state, [appraisal])[0]

    def targets(self, rewards, states, appraisals, next_states, next_appraisals, terminal):
        roots = np.full((len(rewards), self.depth - 1), -1, dtype=np.int64)
        q_main = self._score_grid(next_states, next_appraisals, roots)
        if self.config.current_state_target:
            q_tgt = self._score_grid(states, appraisals, roots, target=True)
        else:
            q_tgt = self._score_grid(next_states, next_appraisals, roots, target=True)
        return ddqn_targets(rewards, self.config.gamma, q_main, q_tgt, terminal)

    def train_step(self, states, appraisals, prefixes, actions, rewards, next_states,
                   next_appraisals, terminal) -> LossReport:
        c = self.config
        states = np.asarray(states, dtype=np.float64)
        appraisals = np.asarray(appraisals, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        n = len(actions)
        prefixes = np.asarray(prefixes, dtype=np.int64).reshape(n, self.depth - 1)
        rows_n = np.arange(n)
        y = self.targets(rewards, states, appraisals, next_states, next_appraisals, terminal)

        # sibling grid (the action's own candidate set)
        grid, valid, owner, pref, cand = self._grid_rows(prefixes)
        hit = grid == actions[:, None]
        if not hit.any(axis=1).all():
            b = int(np.flatnonzero(~hit.any(axis=1))[0])
            raise TaxonomyError(f"action {actions[b]} is not a child of prefix {prefixes[b]}")
        pos = np.argmax(hit, axis=1)

        # child grid for the hierarchy-consistency term
        levels = np.sum(prefixes >= 0, axis=1)
        ext = prefixes.copy()
        can_ext = levels < self.depth - 1
        ext[rows_n[can_ext], levels[can_ext]] = actions[can_ext]
        if c.hier:
            cgrid = np.where(can_ext[:, None], self._cand_table[actions], -1)
        else:
            cgrid = np.full((n, 1), -1, dtype=np.int64)
        cvalid = cgrid >= 0
        cowner = np.nonzero(cvalid)[0]

        self.compressor.train()
        self.scorer.train()
        z = self.compressor.forward(states)
        all_owner = np.concatenate([owner, cowner])
        x = self._row_inputs(z, appraisals, all_owner,
                             np.concatenate([pref, ext[cowner]]),
                             np.concatenate([cand, cgrid[cvalid]]))
        q = self.scorer.forward(x)[:, 0]
        n_sib = len(owner)
        qg = np.full(grid.shape, -np.inf)
        qg[valid] = q[:n_sib]
        qc = np.full(cgrid.shape, -np.inf)
        qc[cvalid] = q[n_sib:]

        dqg = np.zeros(grid.shape)
        dqc = np.zeros(cgrid.shape)
        q_sa = qg[rows_n, pos]
        td = q_sa - y
        dqg[rows_n, pos] += 2.0 * td / n

        reg = conservative_reg(qg, pos)
        if c.reg:
            dqg += (c.reg / n) * conservative_grad(qg, pos)

        has_kids = cvalid.any(axis=1)
        cbest = np.argmax(qc, axis=1)
        h = np.where(has_kids, q_sa - qc[rows_n, cbest], 0.0)
        if c.hier:
            dqg[rows_n, pos] += 2.0 * c.hier * h / n
            dqc[rows_n[has_kids], cbest[has_kids]] -= 2.0 * c.hier * h[has_kids] / n

        td_loss = float(np.mean(td ** 2))
        reg_loss = float(np.mean(reg))
        hier_loss = float(np.mean(h ** 2))
        dq = np.concatenate([dqg[valid], dqc[cvalid]])
        gs, dx = self.scorer.backward(dq[:, None])
        dz = np.zeros_like(z)
        np.add.at(dz, all_owner, dx[:, :z.shape[1]])
        gc, _ = self.compressor.backward(dz)
        grads = {f"scorer.{k}": v for k, v in gs.items()}
        grads.update({f"compressor.{k}": v for k, v in gc.items()})
        self._apply(grads)
        return LossReport(td_loss + c.reg * reg_loss + c.hier * hier_loss, td_loss, reg_loss, hier_loss)

    def hierarchy_residuals(self, states, appraisals, prefixes, actions) -> np.ndarray:
        """|Q(s, a_l) - max_child Q(s, a_{l+1})| for each given transition; NaN for leaves."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        appraisals = np.asarray(appraisals, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        n = len(actions)
        prefixes = np.asarray(prefixes, dtype=np.int64).reshape(n, self.depth - 1)
        rows = np.arange(n)
        grid = self._grid(prefixes)
        hit = grid == actions[:, None]
        if not hit.any(axis=1).all():
            raise TaxonomyError("action is not a child of its prefix")
        qa = self._score_grid(states, appraisals, prefixes)[rows, np.argmax(hit, axis=1)]
        levels = np.sum(prefixes >= 0, axis=1)
        out = np.full(n, np.nan)
        ok = (levels < self.depth - 1) & (self._cand_table[actions] >= 0).any(axis=1)
        if ok.any():
            ext = prefixes[ok].copy()
            ext[np.arange(int(ok.sum())), levels[ok]] = actions[ok]
            qc = self._score_grid(states[ok], appraisals[ok], ext)
            out[ok] = np.abs(qa[ok] - qc.max(axis=1))
        return out

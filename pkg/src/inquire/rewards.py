"""Turn-level information-elicitation rewards and the learned reward model.

Each justice turn is scored on the attorney's reply: relevance to the case's
sub-conclusions, lexical novelty against everything said so far
(expectation-adjusted distinct tokens), and brevity (negative log length).
"""

from __future__ import annotations

import json
import logging
import math
import os
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import CaseRecord, Utterance, tokenize
from .hyperbolic import path_features
from .nn import ExponentialDecay, Network, Optimizer, mse
from .taxonomy import N_APPRAISALS

log = logging.getLogger(__name__)

MAX_RELEVANCE = 5.0

Similarity = Callable[[str, str], float]


def _tokens(x) -> list[str]:
    if isinstance(x, Utterance):
        return x.tokens
    if isinstance(x, str):
        return tokenize(x)
    return list(x)


def tf_cosine(a, b) -> float:
    """Cosine similarity of term-frequency vectors; 0 when either side is empty."""
    ca, cb = Counter(_tokens(a)), Counter(_tokens(b))
    if not ca or not cb:
        return 0.0
    dot = sum(v * cb[k] for k, v in ca.items())
    na = math.sqrt(sum(v * v for v in ca.values()))
    nb = math.sqrt(sum(v * v for v in cb.values()))
    return min(1.0, dot / (na * nb))


def lexical_similarity(a: str, b: str) -> float:
    """Default relevance oracle: 5 x term-frequency cosine."""
    return MAX_RELEVANCE * tf_cosine(a, b)


class RemoteSimilarity:
    """POST ``{"text_a", "text_b"}`` -> ``{"score"}`` in [0, 5].

    Any failure falls back to :func:`lexical_similarity` with a warning.
    """

    def __init__(self, url: str | None = None, api_key: str | None = None, timeout: float = 30.0):
        self.url = url or os.environ.get("INQUIRE_SIMILARITY_URL")
        self.api_key = api_key if api_key is not None else os.environ.get("INQUIRE_SIMILARITY_KEY")
        self.timeout = timeout
        self.fallbacks = 0

    def __call__(self, a: str, b: str) -> float:
        try:
            if not self.url:
                raise urllib.error.URLError("no similarity endpoint configured")
            headers = {"Content-Type": "application/json"}
            if self.api_key:
                headers["Authorization"] = f"Bearer {self.api_key}"
            req = urllib.request.Request(
                self.url, data=json.dumps({"text_a": a, "text_b": b}).encode("utf-8"),
                headers=headers, method="POST")
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                score = float(json.loads(resp.read().decode("utf-8"))["score"])
            if not math.isfinite(score):
                raise ValueError(f"non-finite score {score}")
            return score
        except (urllib.error.URLError, OSError, KeyError, ValueError, TypeError) as exc:
            self.fallbacks += 1
            log.warning("remote similarity failed (%s); using lexical oracle", exc)
            return lexical_similarity(a, b)


def relevance_reward(u_a_next: Utterance | str, sub_conclusions: Sequence[str],
                     oracle: Similarity | None = None) -> float:
    if not sub_conclusions:
        raise ValueError("relevance needs at least one sub-conclusion")
    oracle = oracle or lexical_similarity
    text = u_a_next.text if isinstance(u_a_next, Utterance) else u_a_next
    best = max(oracle(c, text) for c in sub_conclusions)
    return float(min(MAX_RELEVANCE, max(0.0, best)))


@dataclass
class VocabularyState:
    seen: set[str] = field(default_factory=set)

    @property
    def size(self) -> int:
        return len(self.seen)

    def observe(self, tokens) -> None:
        self.seen.update(_tokens(tokens))

    def copy(self) -> "VocabularyState":
        return VocabularyState(set(self.seen))


def novelty_reward(u_a_next, vocab: VocabularyState) -> float:
    """Newly introduced distinct tokens over the expected distinct count at this length.

    ``N_new / (V * (1 - ((V-1)/V)^L))`` with ``V`` the vocabulary seen so far and
    ``L`` the reply length. An empty vocabulary is seeded with the reply's own
    first token.
    """
    toks = _tokens(u_a_next)
    if not toks:
        raise ValueError("novelty of an empty utterance is undefined")
    seen = vocab.seen if vocab.size else {toks[0]}
    v = len(seen)
    n_new = len(set(toks) - seen)
    expected = v * (1.0 - ((v - 1) / v) ** len(toks))
    return n_new / expected


def succinct_reward(u_a_next) -> float:
    toks = _tokens(u_a_next)
    if not toks:
        raise ValueError("succinctness of an empty utterance is undefined")
    return -math.log(len(toks))


@dataclass(frozen=True)
class RewardWeights:
    relevance: float = 0.2
    novelty: float = 0.7
    succinctness: float = 0.1

    def __post_init__(self):
        if min(self.relevance, self.novelty, self.succinctness) < 0:
            raise ValueError("reward weights must be nonnegative")


def aggregate(relevance: float, novelty: float, succinctness: float,
              weights: RewardWeights = RewardWeights()) -> float:
    return (weights.relevance * relevance + weights.novelty * novelty
            + weights.succinctness * succinctness)


@dataclass(frozen=True)
class RewardBreakdown:
    relevance: float
    novelty: float
    succinctness: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


class RewardEngine:
    """Scores justice turns of one dialogue while tracking its vocabulary.

    The vocabulary starts from the argued question; the justice utterance is
    added before its reply is scored and the reply is added afterwards.
    """

    def __init__(self, weights: RewardWeights = RewardWeights(), oracle: Similarity | None = None):
        self.weights = weights
        self.oracle = oracle or lexical_similarity

    def start(self, case: CaseRecord) -> VocabularyState:
        vocab = VocabularyState()
        vocab.observe(tokenize(case.argued_question))
        return vocab

    def score_turn(self, vocab: VocabularyState, justice: Utterance, attorney: Utterance,
                   sub_conclusions: Sequence[str]) -> RewardBreakdown:
        vocab.observe(justice.tokens)
        rel = relevance_reward(attorney, sub_conclusions, self.oracle)
        nov = novelty_reward(attorney, vocab)
        suc = succinct_reward(attorney)
        vocab.observe(attorney.tokens)
        return RewardBreakdown(rel, nov, suc, aggregate(rel, nov, suc, self.weights))

    def score_case(self, case: CaseRecord) -> list[RewardBreakdown]:
        vocab = self.start(case)
        return [self.score_turn(vocab, r.justice, r.attorney, case.sub_conclusions)
                for r in case.rounds]


# -- reward model ---------------------------------------------------------------------------


@dataclass
class RewardModelConfig:
    compressed: int = 32
    hidden: tuple[int, ...] = (64, 32)
    epochs: int = 200
    batch_size: int = 64
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    holdout: float = 0.2
    node_ids: bool = True  # append a multi-hot of the path's nodes to its coordinates
    seed: int = 0


class RewardModel:
    """r_hat = head(compress(s) ++ onehot(p) ++ path features)."""

    def __init__(self, d_raw: int, feat_dim: int, config: RewardModelConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config or RewardModelConfig()
        rng = rng or np.random.default_rng(self.config.seed)
        c = self.config
        self.d_raw, self.feat_dim = d_raw, feat_dim
        self.compressor = Network.mlp([d_raw, c.compressed], rng=rng, out_bn=True,
                                      out_activation="leaky_relu")
        self.head = Network.mlp([c.compressed + N_APPRAISALS + feat_dim, *c.hidden, 1], rng=rng)

    def _inputs(self, z, appraisals, feats):
        onehot = np.eye(N_APPRAISALS)[np.asarray(appraisals, dtype=np.int64)]
        return np.concatenate([z, onehot, feats], axis=1)

    def predict(self, states, appraisals, feats) -> np.ndarray:
        z = self.compressor.predict(states)
        return self.head.predict(self._inputs(z, appraisals, feats))[:, 0]

    def params(self) -> dict[str, np.ndarray]:
        out = {f"compressor.{k}": v for k, v in self.compressor.params.items()}
        out.update({f"head.{k}": v for k, v in self.head.params.items()})
        return out

    def loss_and_grads(self, states, appraisals, feats, rewards):
        self.compressor.train()
        self.head.train()
        z = self.compressor.forward(states)
        pred = self.head.forward(self._inputs(z, appraisals, feats))
        loss, dpred = mse(pred[:, 0], rewards)
        gh, dx = self.head.backward(dpred[:, None])
        gc, _ = self.compressor.backward(dx[:, :z.shape[1]])
        grads = {f"head.{k}": v for k, v in gh.items()}
        grads.update({f"compressor.{k}": v for k, v in gc.items()})
        return loss, grads

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"compressor/{k}": v for k, v in self.compressor.state_arrays().items()}
        out.update({f"head/{k}": v for k, v in self.head.state_arrays().items()})
        return out

    def load_arrays(self, arrays) -> "RewardModel":
        from .store import strip_prefix
        self.compressor.load_arrays(strip_prefix("compressor", arrays))
        self.head.load_arrays(strip_prefix("head", arrays))
        return self


@dataclass
class RewardModelReport:
    train_loss: list[float]
    heldout_mse: float
    n_train: int
    n_heldout: int


def train_reward_model(states, appraisals, feats, rewards, config: RewardModelConfig | None = None,
                       model: RewardModel | None = None,
                       on_epoch: Callable[[int, float], None] | None = None
                       ) -> tuple[RewardModel, RewardModelReport]:
    """Fit the reward model by minibatch MSE; held-out MSE is measured in eval mode.

    With fewer than five examples everything is used for training and the
    held-out figure is the training-set MSE.
    """
    config = config or RewardModelConfig()
    states = np.asarray(states, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    appraisals = np.asarray(appraisals, dtype=np.int64)
    feats = np.asarray(feats, dtype=np.float64)
    n = len(rewards)
    if n == 0:
        raise ValueError("reward model needs a nonempty dataset")
    rng = np.random.default_rng(config.seed)
    model = model or RewardModel(states.shape[1], feats.shape[1], config, rng)
    order = rng.permutation(n)
    n_hold = int(round(n * config.holdout)) if n >= 5 else 0
    hold, train = order[:n_hold], order[n_hold:]
    steps_per_epoch = max(1, math.ceil(len(train) / config.batch_size))
    opt = Optimizer(ExponentialDecay(config.lr_start, config.lr_end, config.epochs * steps_per_epoch))
    history = []
    for _ in range(config.epochs):
        perm = train[rng.permutation(len(train))]
        total = 0.0
        # balanced batches avoid a trailing batch of one row (degenerate BN statistics)
        for idx in np.array_split(perm, steps_per_epoch):
            loss, grads = model.loss_and_grads(states[idx], appraisals[idx], feats[idx], rewards[idx])
            opt.step(model.params(), grads)
            total += loss * len(idx)
        history.append(total / len(train))
        if on_epoch is not None:
            on_epoch(len(history), history[-1])
    model.compressor.eval()
    model.head.eval()
    eval_idx = hold if n_hold else train
    pred = model.predict(states[eval_idx], appraisals[eval_idx], feats[eval_idx])
    heldout = float(np.mean((pred - rewards[eval_idx]) ** 2))
    return model, RewardModelReport(history, heldout, len(train), n_hold)


def offline_policy_value(model: RewardModel, states, appraisal_agent, dialogue_agent,
                         table, depth: int = 3) -> float:
    """Mean predicted reward of the agents' greedy (appraisal, act path) over ``states``."""
    states = np.asarray(states, dtype=np.float64)
    if len(states) == 0:
        raise ValueError("offline evaluation needs at least one state")
    appraisals = appraisal_agent.select_batch(states)
    paths = dialogue_agent.select_paths(states, appraisals)
    rows = np.full((len(paths), depth), -1, dtype=np.int64)
    for i, p in enumerate(paths):
        rows[i, :len(p)] = p.nodes
    feats = path_features(table, rows, depth, model.config.node_ids)
    return float(np.mean(model.predict(states, appraisals, feats)))

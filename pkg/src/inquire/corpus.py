"""Case records, context embedding, appraisal labeling and offline dataset construction."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import store
from .taxonomy import (APPRAISAL_LABELS, ActionTree, Appraisal, TaxonomyError,
                       builtin_tree)

log = logging.getLogger(__name__)

SPEAKERS = ("justice", "attorney", "case")
BUNDLE_SCHEMA = 1


class CorpusError(ValueError):
    """Malformed corpus line (carries the location)."""


class SchemaError(CorpusError):
    """Well-formed record missing a mandatory field or violating an invariant."""


class DataError(ValueError):
    """Records that parse but cannot be turned into transitions."""


class ProviderError(RuntimeError):
    def __init__(self, msg: str, retriable: bool = True):
        super().__init__(msg)
        self.retriable = retriable


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str

    def __post_init__(self):
        if self.speaker not in SPEAKERS:
            raise SchemaError(f"unknown speaker {self.speaker!r}")

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.text)


@dataclass
class Round:
    justice: Utterance
    attorney: Utterance
    appraisal: str | None = None
    action_path: tuple[str, ...] | None = None
    reward: float | None = None  # externally supplied turn reward; overrides the reward engine


@dataclass
class CaseRecord:
    case_id: str
    background: str
    argued_question: str
    sub_conclusions: list[str]
    topics: list[str] = field(default_factory=list)
    rounds: list[Round] = field(default_factory=list)

    def preamble(self) -> Utterance:
        return Utterance("case", f"{self.background} {self.argued_question}".strip())

    def context(self, upto: int) -> list[Utterance]:
        """Case preamble plus every utterance of rounds before ``upto``."""
        out = [self.preamble()]
        for rnd in self.rounds[:upto]:
            out.extend((rnd.justice, rnd.attorney))
        return out


# -- wire format ---------------------------------------------------------------------


def case_to_dict(case: CaseRecord) -> dict:
    rounds = []
    for r in case.rounds:
        d = {"justice_text": r.justice.text, "attorney_text": r.attorney.text}
        if r.appraisal is not None:
            d["appraisal"] = r.appraisal
        if r.action_path is not None:
            d["action_path"] = list(r.action_path)
        if r.reward is not None:
            d["reward"] = r.reward
        rounds.append(d)
    return dict(case_id=case.case_id, background=case.background,
                argued_question=case.argued_question,
                sub_conclusions=list(case.sub_conclusions), topics=list(case.topics),
                rounds=rounds)


def _require(rec: dict, key: str, kind, where: str):
    if key not in rec:
        raise SchemaError(f"{where}: missing field {key!r}")
    val = rec[key]
    if not isinstance(val, kind):
        raise SchemaError(f"{where}: field {key!r} has wrong type {type(val).__name__}")
    return val


def case_from_dict(rec: dict, where: str = "record") -> CaseRecord:
    if not isinstance(rec, dict):
        raise SchemaError(f"{where}: expected an object")
    case_id = _require(rec, "case_id", str, where)
    background = _require(rec, "background", str, where)
    question = _require(rec, "argued_question", str, where)
    subs = _require(rec, "sub_conclusions", list, where)
    if not subs or not all(isinstance(s, str) and s.strip() for s in subs):
        raise SchemaError(f"{where}: sub_conclusions must be a nonempty list of text")
    topics = rec.get("topics", [])
    if not isinstance(topics, list) or not all(isinstance(t, str) for t in topics):
        raise SchemaError(f"{where}: topics must be a list of text")
    rounds = []
    for i, r in enumerate(_require(rec, "rounds", list, where)):
        rw = f"{where} round {i}"
        if not isinstance(r, dict):
            raise SchemaError(f"{rw}: expected an object")
        jt = _require(r, "justice_text", str, rw)
        at = _require(r, "attorney_text", str, rw)
        if not at.strip():
            raise SchemaError(f"{rw}: attorney_text is empty")
        appraisal = r.get("appraisal")
        if appraisal is not None and appraisal not in APPRAISAL_LABELS:
            raise SchemaError(f"{rw}: unknown appraisal {appraisal!r}")
        path = r.get("action_path")
        if path is not None:
            if not isinstance(path, list) or not 1 <= len(path) <= 3 or \
                    not all(isinstance(p, str) for p in path):
                raise SchemaError(f"{rw}: action_path must be 1-3 labels")
            path = tuple(path)
        reward = r.get("reward")
        if reward is not None and not isinstance(reward, (int, float)):
            raise SchemaError(f"{rw}: reward must be numeric")
        rounds.append(Round(Utterance("justice", jt), Utterance("attorney", at),
                            appraisal, path, None if reward is None else float(reward)))
    return CaseRecord(case_id, background, question, list(subs), list(topics), rounds)


def parse_corpus(path: str | Path) -> list[CaseRecord]:
    """Read a JSON-lines corpus; blank lines are skipped."""
    cases = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc.msg} (column {exc.colno})") from exc
            cases.append(case_from_dict(rec, where=f"{path}:{lineno}"))
    return cases


def write_corpus(cases: Iterable[CaseRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for case in cases:
            fh.write(json.dumps(case_to_dict(case), ensure_ascii=False, sort_keys=True) + "\n")


# -- embedding providers ---------------------------------------------------------------


@dataclass(frozen=True)
class StateEmbedding:
    raw: np.ndarray
    provenance: str


class EmbeddingProvider(Protocol):
    dim: int

    @property
    def provider_id(self) -> str: ...

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def render_context(history: Sequence[Utterance]) -> str:
    return "\n".join(f"{u.speaker}: {u.text}" for u in history)


class HashingEmbedder:
    """Seeded signed feature hashing of lowercase tokens, L2-normalized."""

    def __init__(self, dim: int = 4096, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=False)

    @property
    def provider_id(self) -> str:
        return f"hashing(dim={self.dim},seed={self.seed})"

    def _slot(self, token: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._key).digest(),
                           "little")
        return h % self.dim, (1.0 if (h >> 63) & 1 else -1.0)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for row, text in enumerate(texts):
            for tok in tokenize(text):
                idx, sign = self._slot(tok)
                out[row, idx] += sign
            norm = np.linalg.norm(out[row])
            if norm > 0:
                out[row] /= norm
        return out


class RemoteEmbedder:
    """POST ``{"model", "input": [...]}`` and read ``{"embeddings": [[...]]}``.

    Endpoint and key come from ``INQUIRE_EMBED_URL`` / ``INQUIRE_EMBED_KEY``
    unless given explicitly.
    """

    def __init__(self, dim: int, model: str = "default", url: str | None = None,
                 api_key: str | None = None, timeout: float = 30.0, retries: int = 2,
                 backoff: float = 0.5):
        self.dim = dim
        self.model = model
        self.url = url or os.environ.get("INQUIRE_EMBED_URL")
        self.api_key = api_key if api_key is not None else os.environ.get("INQUIRE_EMBED_KEY")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        if not self.url:
            raise ProviderError("no embedding endpoint configured (INQUIRE_EMBED_URL)", retriable=False)

    @property
    def provider_id(self) -> str:
        return f"remote(model={self.model},dim={self.dim})"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        body = json.dumps({"model": self.model, "input": list(texts)}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last = None
        for attempt in range(self.retries + 1):
            try:
                req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                vecs = np.asarray(payload["embeddings"], dtype=np.float64)
                if vecs.shape != (len(texts), self.dim) or not np.all(np.isfinite(vecs)):
                    raise ProviderError(f"embedding endpoint returned shape {vecs.shape}", retriable=False)
                return vecs
            except ProviderError:
                raise
            except (urllib.error.URLError, OSError, KeyError, ValueError) as exc:
                last = exc
                log.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise ProviderError(f"embedding endpoint unreachable: {last}")


def embed_context(provider: EmbeddingProvider, history: Sequence[Utterance]) -> StateEmbedding:
    if not history:
        raise ValueError("cannot embed an empty history")
    text = render_context(history)
    vec = provider.embed([text])[0]
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
    return StateEmbedding(vec, f"{provider.provider_id}:{digest}")


# -- appraisal labeling -------------------------------------------------------------------


def jaccard(a: Sequence[str], b: Sequence[str]) -> float:
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


REDUNDANCY_JACCARD = 0.8


def infer_appraisal(u_j_prev: Utterance | None, u_a: Utterance | None, u_j: Utterance,
                    annotation: str | Appraisal | None = None) -> Appraisal:
    """Appraisal behind the justice turn ``u_j`` given the previous exchange.

    A supplied annotation always wins. Otherwise: a near-repeat of the previous
    justice utterance means redundancy, a follow-up question reusing the
    attorney's words means diving deeper, anything else is "Otherwise".
    """
    if annotation is not None:
        if isinstance(annotation, Appraisal):
            return annotation
        try:
            return Appraisal.from_label(annotation)
        except TaxonomyError as exc:
            raise SchemaError(str(exc)) from None
    if u_j_prev is not None and u_j_prev.tokens and u_j.tokens \
            and jaccard(u_j_prev.tokens, u_j.tokens) >= REDUNDANCY_JACCARD:
        return Appraisal.from_label("Find redundancy")
    if u_a is not None and u_j.text.rstrip().endswith("?") and set(u_j.tokens) & set(u_a.tokens):
        return Appraisal.from_label("Dive deeper")
    return Appraisal.from_label("Otherwise")


def round_appraisals(case: CaseRecord) -> list[Appraisal]:
    out = []
    for t, rnd in enumerate(case.rounds):
        prev = case.rounds[t - 1] if t > 0 else None
        out.append(infer_appraisal(prev.justice if prev else None,
                                   prev.attorney if prev else None,
                                   rnd.justice, rnd.appraisal))
    return out


# -- transition dataset ---------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    appraisal: int
    parent_prefix: tuple[int, ...]
    action: int
    reward: float
    next_state: np.ndarray
    next_appraisal: int
    terminal: bool


@dataclass
class DatasetBundle:
    """Three aligned offline datasets over a shared state matrix.

    Per-round arrays (appraisal and reward-model tuples) have one row per
    corpus round; hierarchical arrays have one row per path level. Prefixes
    and paths are padded with -1.
    """

    states: np.ndarray
    rounds: dict[str, np.ndarray]
    hier: dict[str, np.ndarray]
    meta: dict

    @property
    def n_rounds(self) -> int:
        return len(self.rounds["reward"])

    @property
    def n_hier(self) -> int:
        return len(self.hier["action"])

    def counts(self) -> dict[str, int]:
        return {"appraisal": self.n_rounds, "hierarchical": self.n_hier,
                "reward_model": self.n_rounds, "states": len(self.states),
                "cases": len(self.meta.get("case_ids", []))}

    def transition(self, i: int) -> Transition:
        h = self.hier
        prefix = tuple(int(x) for x in h["prefix"][i] if x >= 0)
        return Transition(self.states[h["state"][i]], int(h["appraisal"][i]), prefix,
                          int(h["action"][i]), float(h["reward"][i]),
                          self.states[h["next_state"][i]], int(h["next_appraisal"][i]),
                          bool(h["terminal"][i]))

    def save(self, path: str | Path) -> None:
        arrays = {"states": self.states}
        arrays.update(store.prefixed("rounds", self.rounds))
        arrays.update(store.prefixed("hier", self.hier))
        store.save(path, dict(kind="dataset_bundle", schema=BUNDLE_SCHEMA, **self.meta), arrays)

    @classmethod
    def load(cls, path: str | Path) -> "DatasetBundle":
        meta, arrays = store.load(path)
        if meta.get("kind") != "dataset_bundle":
            raise store.ContainerError(f"{path} is not a dataset bundle")
        meta = {k: v for k, v in meta.items() if k not in ("kind", "schema")}
        return cls(arrays["states"], store.strip_prefix("rounds", arrays),
                   store.strip_prefix("hier", arrays), meta)


def build_transitions(cases: Sequence[CaseRecord], rewards, provider: EmbeddingProvider,
                      tree: ActionTree | None = None) -> DatasetBundle:
    """Expand annotated cases into appraisal, hierarchical and reward-model tuples.

    ``rewards`` must offer ``score_case(case) -> list[RewardBreakdown]``. A
    round's explicit ``reward`` field, when present, replaces the computed total.
    The last round of every case is terminal.
    """
    tree = tree or builtin_tree()
    depth = tree.depth
    states: list[np.ndarray] = []
    r_cols = {k: [] for k in ("state", "appraisal", "path", "reward", "next_state",
                              "next_appraisal", "terminal", "case", "round",
                              "relevance", "novelty", "succinctness")}
    h_cols = {k: [] for k in ("state", "appraisal", "prefix", "level", "action", "reward",
                              "next_state", "next_appraisal", "terminal", "row")}

    for ci, case in enumerate(cases):
        if not case.rounds:
            continue
        paths = []
        for t, rnd in enumerate(case.rounds):
            if rnd.action_path is None:
                raise DataError(f"case {case.case_id!r} round {t}: missing action path")
            try:
                paths.append(tree.path_from_labels(rnd.action_path))
            except TaxonomyError as exc:
                raise DataError(f"case {case.case_id!r} round {t}: invalid action path ({exc})") from None
        try:
            appraisals = round_appraisals(case)
        except SchemaError as exc:
            raise DataError(f"case {case.case_id!r}: {exc}") from None
        breakdowns = rewards.score_case(case)

        base = len(states)
        contexts = [render_context(case.context(t)) for t in range(len(case.rounds) + 1)]
        states.extend(provider.embed(contexts))
        n = len(case.rounds)
        for t, (rnd, path, app, bd) in enumerate(zip(case.rounds, paths, appraisals, breakdowns)):
            reward = rnd.reward if rnd.reward is not None else bd.total
            terminal = t == n - 1
            nxt_app = appraisals[t + 1].index if not terminal else APPRAISAL_LABELS.index("Otherwise")
            row = len(r_cols["reward"])
            padded = list(path.nodes) + [-1] * (depth - len(path))
            for key, val in (("state", base + t), ("appraisal", app.index), ("path", padded),
                             ("reward", reward), ("next_state", base + t + 1),
                             ("next_appraisal", nxt_app), ("terminal", terminal), ("case", ci),
                             ("round", t), ("relevance", bd.relevance), ("novelty", bd.novelty),
                             ("succinctness", bd.succinctness)):
                r_cols[key].append(val)
            for level, action in enumerate(path.nodes):
                prefix = list(path.nodes[:level]) + [-1] * (depth - 1 - level)
                for key, val in (("state", base + t), ("appraisal", app.index), ("prefix", prefix),
                                 ("level", level), ("action", action), ("reward", reward),
                                 ("next_state", base + t + 1), ("next_appraisal", nxt_app),
                                 ("terminal", terminal), ("row", row)):
                    h_cols[key].append(val)

    int_keys = {"state", "appraisal", "path", "next_state", "next_appraisal", "case", "round",
                "prefix", "level", "action", "row"}

    def pack(cols, widths):
        out = {}
        for k, v in cols.items():
            if k in ("terminal",):
                out[k] = np.array(v, dtype=bool)
            elif k in int_keys:
                arr = np.array(v, dtype=np.int64)
                if k in widths and arr.size == 0:
                    arr = arr.reshape(0, widths[k])
                out[k] = arr
            else:
                out[k] = np.array(v, dtype=np.float64)
        return out

    dim = provider.dim
    state_mat = np.array(states, dtype=np.float64).reshape(len(states), dim)
    meta = dict(case_ids=[c.case_id for c in cases if c.rounds], d_raw=dim,
                provider=provider.provider_id, taxonomy=tree.digest(), depth=depth)
    return DatasetBundle(state_mat, pack(r_cols, {"path": depth}),
                         pack(h_cols, {"prefix": depth - 1}), meta)

"""Self-play episodes against a responder, and the multi-turn dialogue metrics.

An episode alternates: embed the context, pick an appraisal, pick an act
path, realize the justice utterance, let the responder answer, score the
turn. Everything here is deterministic with the template realizer and the
scripted responder, so a trace is a pure function of (agents, case, config).
"""

from __future__ import annotations

import json
import logging
import math
import os
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .corpus import CaseRecord, ProviderError, Utterance, embed_context
from .rewards import RewardBreakdown, RewardEngine, tf_cosine
from .taxonomy import ActionPath, ActionTree, Appraisal

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
MAX_ROUNDS = 10
MR_GAMMA = 0.7

Similarity = Callable[[str, str], float]


@dataclass(frozen=True)
class TraceRound:
    justice: Utterance
    attorney: Utterance
    path: ActionPath
    appraisal: Appraisal
    reward: RewardBreakdown
    target: str
    tags: tuple[str, ...] = ()


@dataclass
class DialogueTrace:
    case_id: str
    rounds: list[TraceRound] = field(default_factory=list)
    truncated: bool = False
    aborted: bool = False
    error: str | None = None

    def __len__(self) -> int:
        return len(self.rounds)

    def justice_texts(self) -> list[str]:
        return [r.justice.text for r in self.rounds]

    def topics(self) -> list[str]:
        """Distinct act targets plus responder tags, in first-seen order.

        A round with neither (e.g. a remote responder without tags and no
        target) contributes its attorney text.
        """
        out: list[str] = []
        for r in self.rounds:
            items = ([r.target] if r.target else []) + list(r.tags)
            for t in items or [r.attorney.text]:
                if t not in out:
                    out.append(t)
        return out


# -- realizers -------------------------------------------------------------------------------


@dataclass(frozen=True)
class Realization:
    text: str
    target: str


class Realizer(Protocol):
    def realize(self, tree: ActionTree, path: ActionPath, case: CaseRecord, round_index: int,
                history: Sequence[Utterance]) -> Realization: ...


LEAF_FRAMES: dict[str, str] = {
    "Clarify important aspect of the case": "Can you clarify what happened regarding {topic}?",
    "Clarify legal arguments or issues": "What exactly is your legal argument about {topic}?",
    "Clarify definition of concept": "How do you define {topic} in this case?",
    "Probe the consistency between the attorney's arguments and established legal principles "
    "or precedents": "How does your position on {topic} square with our precedents?",
    "Probe the assumption underlying the attorney's arguments":
        "Aren't you assuming something about {topic} that the record does not show?",
    "Ask for the attorney's position": "What is your position on {topic}?",
    "Lead the attorney toward a particular conclusion":
        "So wouldn't you agree that {topic} decides this case?",
    "Lead the attorney to certain aspects": "Let's turn to {topic}. What about that?",
    "Present hypothetical situations to test legal limits":
        "Suppose {topic} went much further. Where does your rule stop?",
    "Present hypothetical situations to test legal issues in the case":
        "Imagine a case just like this one except for {topic}. Same result?",
    "Compare to hypothetical situations to assess legal principles":
        "Compare a situation where {topic} was absent. Does the principle still hold?",
    "Highlight key differences from hypothetical situations":
        "Isn't {topic} exactly what distinguishes this from the hypothetical?",
    "Explore different types of consequences":
        "What would follow for future cases if we ruled your way on {topic}?",
    "Acknowledge the attorney's arguments": "I understand your point about {topic}.",
    "Prompt for information that would support the attorney's arguments":
        "Is there anything in the record on {topic} that supports you?",
    "Oppose the attorney's arguments": "I don't think your argument on {topic} works.",
    "Provide counterexample to challenge the attorney's arguments":
        "But consider a counterexample involving {topic}.",
    "Lead attorneys by examples (non-questions) for detailed explanation of a concept":
        "Take {topic} as an example and walk us through it.",
    "Pressure a rash response from the attorney": "Quickly, yes or no: does {topic} matter?",
}
GENERIC_FRAME = "{act}: {topic}?"


def case_topic(case: CaseRecord, round_index: int, leaf: int) -> str:
    if not case.topics:
        return case.argued_question
    return case.topics[(round_index + leaf) % len(case.topics)]


class TemplateRealizer:
    """One sentence frame per leaf act, filled with a case topic."""

    def __init__(self, frames: dict[str, str] | None = None):
        self.frames = LEAF_FRAMES if frames is None else frames

    def realize(self, tree, path, case, round_index, history) -> Realization:
        if not len(path):
            raise ValueError("cannot realize an empty act path")
        leaf = path.nodes[-1]
        label = tree.node(leaf).label
        topic = case_topic(case, round_index, leaf)
        frame = self.frames.get(label, GENERIC_FRAME)
        return Realization(frame.format(topic=topic, act=label), topic)


# -- responders ------------------------------------------------------------------------------


@dataclass(frozen=True)
class Reply:
    text: str
    tags: tuple[str, ...] = ()


class Responder(Protocol):
    def respond(self, tree: ActionTree, path: ActionPath, case: CaseRecord, round_index: int,
                justice: Utterance, history: Sequence[Utterance]) -> Reply: ...


REPLY_FRAMES: dict[str, tuple[str, ...]] = {
    "Question": ("On {topic}, our answer is that {point}.",
                 "Regarding {topic}: {point}."),
    "Make hypothesis": ("Even in that hypothetical about {topic}, {point}.",
                        "The hypothetical does not change things, because {point}."),
    "Declaration": ("Respectfully, {point}.",
                    "We would add on {topic} that {point}."),
}
GENERIC_REPLY = ("{point}.",)


class ScriptedResponder:
    """Attorney stand-in: the reply depends only on the act path, round and case."""

    kind = "scripted"

    def __init__(self, frames: dict[str, tuple[str, ...]] | None = None):
        self.frames = REPLY_FRAMES if frames is None else frames

    def respond(self, tree, path, case, round_index, justice, history) -> Reply:
        leaf = path.nodes[-1]
        root_label = tree.node(path.nodes[0]).label
        frames = self.frames.get(root_label, GENERIC_REPLY)
        topic = case_topic(case, round_index, leaf)
        point = case.sub_conclusions[(round_index + leaf) % len(case.sub_conclusions)]
        text = frames[(round_index + leaf) % len(frames)].format(topic=topic, point=point.rstrip("."))
        return Reply(text, (topic,))


class ChatEndpoint:
    """Chat-completion style POST ``{"messages", "model"}`` -> ``{"text"}``."""

    def __init__(self, url: str | None = None, api_key: str | None = None, model: str = "default",
                 timeout: float = 30.0):
        self.url = url or os.environ.get("INQUIRE_CHAT_URL")
        self.api_key = api_key if api_key is not None else os.environ.get("INQUIRE_CHAT_KEY")
        self.model = model
        self.timeout = timeout

    def complete(self, messages: list[dict]) -> str:
        if not self.url:
            raise ProviderError("no chat endpoint configured (INQUIRE_CHAT_URL)", retriable=False)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = json.dumps({"messages": messages, "model": self.model}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                text = json.loads(resp.read().decode("utf-8"))["text"]
        except (urllib.error.URLError, OSError) as exc:
            raise ProviderError(f"chat endpoint unreachable: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed chat response: {exc}", retriable=False) from exc
        if not isinstance(text, str) or not text.strip():
            raise ProviderError("chat endpoint returned empty text", retriable=False)
        return text.strip()


def _chat_history(history: Sequence[Utterance]) -> list[dict]:
    role = {"justice": "user", "attorney": "assistant", "case": "system"}
    return [{"role": role[u.speaker], "content": u.text} for u in history]


class RemoteRealizer:
    def __init__(self, endpoint: ChatEndpoint):
        self.endpoint = endpoint

    def realize(self, tree, path, case, round_index, history) -> Realization:
        acts = " > ".join(path.labels(tree))
        topic = case_topic(case, round_index, path.nodes[-1])
        prompt = (f"You are a justice at oral argument. Dialogue act: {acts}. "
                  f"Target: {topic}. Write the justice's next utterance.")
        text = self.endpoint.complete(_chat_history(history) + [{"role": "system", "content": prompt}])
        return Realization(text, topic)


class RemoteResponder:
    kind = "remote"

    def __init__(self, endpoint: ChatEndpoint):
        self.endpoint = endpoint

    def respond(self, tree, path, case, round_index, justice, history) -> Reply:
        msgs = [{"role": "system", "content": "You are the attorney arguing this case. Answer the justice."}]
        msgs += _chat_history(list(history) + [justice])
        return Reply(self.endpoint.complete(msgs))


# -- episodes --------------------------------------------------------------------------------


def run_episode(appraisal_agent, dialogue_agent, case: CaseRecord, responder: Responder,
                realizer: Realizer, provider, engine: RewardEngine | None = None,
                max_rounds: int = MAX_ROUNDS) -> DialogueTrace:
    """Play up to ``max_rounds`` justice/attorney exchanges with greedy agents.

    A responder or realizer failure stops the episode; the partial trace is
    returned with ``aborted`` set.
    """
    if max_rounds < 0:
        raise ValueError("max_rounds must be >= 0")
    engine = engine or RewardEngine()
    tree = dialogue_agent.tree
    trace = DialogueTrace(case.case_id)
    history = case.context(0)
    vocab = engine.start(case)
    for t in range(max_rounds):
        state = embed_context(provider, history).raw
        appraisal = appraisal_agent.select(state)
        path = dialogue_agent.select_path(state, appraisal)
        try:
            real = realizer.realize(tree, path, case, t, history)
            justice = Utterance("justice", real.text)
            reply = responder.respond(tree, path, case, t, justice, history)
            attorney = Utterance("attorney", reply.text)
            if not attorney.tokens:
                raise ProviderError("responder produced an empty reply", retriable=False)
        except ProviderError as exc:
            log.warning("episode %s aborted at round %d: %s", case.case_id, t, exc)
            trace.aborted, trace.error = True, str(exc)
            return trace
        reward = engine.score_turn(vocab, justice, attorney, case.sub_conclusions)
        if not isinstance(appraisal, Appraisal):
            appraisal = Appraisal(int(appraisal))
        trace.rounds.append(TraceRound(justice, attorney, path, appraisal, reward, real.target, reply.tags))
        history = list(history) + [justice, attorney]
    trace.truncated = True
    return trace


def simulate_cases(appraisal_agent, dialogue_agent, cases: Sequence[CaseRecord], responder, realizer,
                   provider, engine: RewardEngine | None = None, max_rounds: int = MAX_ROUNDS,
                   workers: int = 1) -> list[DialogueTrace]:
    """Run one episode per case; ``workers`` bounds concurrent (remote) episodes."""
    appraisal_agent.eval()
    dialogue_agent.eval()

    def one(case):
        return run_episode(appraisal_agent, dialogue_agent, case, responder, realizer, provider,
                           engine, max_rounds)

    if workers <= 1:
        return [one(c) for c in cases]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, cases))


# -- metrics ---------------------------------------------------------------------------------


def coverage_score(original_topics: Sequence[str], simulated_topics: Sequence[str],
                   sim: Similarity | None = None, mode: str = "simulated") -> tuple[float, float]:
    """Sum of best-match similarities, and that sum divided by the summed-over count.

    ``mode="simulated"`` sums over simulated topics (each matched to its
    closest original); ``mode="original"`` sums over originals instead.
    """
    if not original_topics or not simulated_topics:
        raise ValueError("coverage needs nonempty original and simulated topic lists")
    sim = sim or tf_cosine
    if mode == "simulated":
        outer, inner = simulated_topics, original_topics
        raw = sum(max(sim(o, s) for o in inner) for s in outer)
    elif mode == "original":
        outer, inner = original_topics, simulated_topics
        raw = sum(max(sim(o, s) for s in inner) for o in outer)
    else:
        raise ValueError(f"unknown coverage mode {mode!r}")
    return float(raw), float(raw / len(outer))


def mr_score(justice_utterances: Sequence[str], question: str, gamma: float = MR_GAMMA,
             sim: Similarity | None = None) -> float:
    """Mean over turns of gamma*sim(u_j, q) - (1-gamma)*max_{i<j} sim(u_i, u_j)."""
    if not justice_utterances:
        raise ValueError("MR score needs at least one utterance")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    sim = sim or tf_cosine
    total = 0.0
    for j, u in enumerate(justice_utterances):
        redundancy = max((sim(justice_utterances[i], u) for i in range(j)), default=0.0)
        total += gamma * sim(u, question) - (1.0 - gamma) * redundancy
    return total / len(justice_utterances)


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_run(traces: Sequence[DialogueTrace], cases: Sequence[CaseRecord], *,
                 sim: Similarity | None = None, coverage_mode: str = "simulated",
                 gamma: float = MR_GAMMA, offline_value: float | None = None,
                 config_hash: str = "", seed: int = 0) -> dict:
    """Per-case and mean metrics as a JSON-ready report.

    Cases whose trace has no rounds get null metrics and are left out of the
    means.
    """
    if len(traces) != len(cases):
        raise ValueError(f"{len(traces)} traces for {len(cases)} cases")
    per_case = []
    for trace, case in zip(traces, cases):
        if trace.case_id != case.case_id:
            raise ValueError(f"trace {trace.case_id!r} does not match case {case.case_id!r}")
        row = dict(case_id=case.case_id, rounds=len(trace), truncated=trace.truncated,
                   aborted=trace.aborted, coverage_raw=None, coverage_normalized=None, mr=None,
                   relevance=None, novelty=None, succinctness=None, reward=None)
        if len(trace):
            originals = case.topics or [case.argued_question]
            raw, norm = coverage_score(originals, trace.topics(), sim, coverage_mode)
            row.update(coverage_raw=raw, coverage_normalized=norm,
                       mr=mr_score(trace.justice_texts(), case.argued_question, gamma, sim))
            for key in ("relevance", "novelty", "succinctness", "total"):
                row["reward" if key == "total" else key] = float(
                    np.mean([getattr(r.reward, key) for r in trace.rounds]))
        per_case.append(row)
    keys = ("coverage_raw", "coverage_normalized", "mr", "relevance", "novelty", "succinctness", "reward")
    aggregate = {k: _mean(r[k] for r in per_case) for k in keys}
    aggregate.update(offline_r_hat=offline_value, cases=len(per_case),
                     aborted=sum(r["aborted"] for r in per_case),
                     mean_rounds=_mean(r["rounds"] for r in per_case))
    return dict(schema_version=REPORT_SCHEMA, config_hash=config_hash, seed=seed,
                coverage_mode=coverage_mode, gamma=gamma, cases=per_case, aggregate=aggregate)


def dumps_report(report: dict) -> str:
    for v in _floats(report):
        if not math.isfinite(v):
            raise ValueError("report contains a non-finite number")
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def _floats(obj):
    if isinstance(obj, float):
        yield obj
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _floats(v)
    elif isinstance(obj, list):
        for v in obj:
            yield from _floats(v)


def write_report(report: dict, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dumps_report(report), encoding="utf-8")
    os.replace(tmp, path)


def read_report(path: str | Path) -> dict:
    report = json.loads(Path(path).read_text(encoding="utf-8"))
    if report.get("schema_version") != REPORT_SCHEMA:
        raise ValueError(f"{path}: unsupported report schema {report.get('schema_version')!r}")
    return report


def trace_to_dict(trace: DialogueTrace, tree: ActionTree) -> dict:
    return dict(case_id=trace.case_id, truncated=trace.truncated, aborted=trace.aborted,
                error=trace.error,
                rounds=[dict(justice=r.justice.text, attorney=r.attorney.text,
                             path=r.path.labels(tree), appraisal=r.appraisal.label,
                             target=r.target, tags=list(r.tags), reward=r.reward.as_dict())
                        for r in trace.rounds])

"""Offline training and evaluation pipeline over one output directory.

Stages run in the order embeddings -> reward-model -> appraisal -> dialogue.
Each writes a checkpoint container plus an entry in ``manifest.json``; the
agent stages checkpoint after every epoch so an interrupted run resumes with
bit-identical losses.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import arena, store
from .agents import AppraisalAgent, DialogueAgent, LossReport, QConfig
from .config import RunConfig
from .corpus import DatasetBundle, HashingEmbedder, RemoteEmbedder, build_transitions, parse_corpus
from .hyperbolic import EmbeddingTable, path_features, train_embeddings
from .rewards import (RemoteSimilarity, RewardEngine, RewardModel, RewardModelConfig,
                      offline_policy_value, train_reward_model)
from .taxonomy import ActionTree, builtin_tree, load_tree

log = logging.getLogger("inquire")

STAGES = ("embeddings", "reward-model", "appraisal", "dialogue")
MANIFEST_SCHEMA = 1


class DependencyError(RuntimeError):
    """A prerequisite artifact is missing or incompatible."""


class LockError(RuntimeError):
    """Another run owns the output directory."""


# -- workspace ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class Workspace:
    root: Path

    @classmethod
    def of(cls, config: RunConfig) -> "Workspace":
        return cls(Path(config.out))

    @property
    def bundle(self) -> Path:
        return self.root / "bundle.inqr"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def report(self) -> Path:
        return self.root / "report.json"

    @property
    def traces(self) -> Path:
        return self.root / "traces.jsonl"

    def checkpoint(self, stage: str) -> Path:
        return self.root / f"{stage}.inqr"

    def require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise DependencyError(f"missing {what}: {path} (run the earlier stage first)")
        return path


class OutputLock:
    """Exclusive ownership of an output directory through a ``.lock`` file."""

    def __init__(self, root: Path):
        self.path = Path(root) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            if not self._stale():
                raise LockError(f"{self.path.parent} is in use by another run ({self.path})") from None
            log.warning("removing stale lock %s", self.path)
            self.path.unlink()
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def _stale(self) -> bool:
        try:
            pid = int(self.path.read_text().strip())
        except (OSError, ValueError):
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


# -- builders ----------------------------------------------------------------------------------


def make_tree(config: RunConfig) -> ActionTree:
    return load_tree(config.taxonomy) if config.taxonomy else builtin_tree()


def make_provider(config: RunConfig):
    if config.embedder == "remote":
        return RemoteEmbedder(config.d_raw, model=config.embed_model, timeout=config.provider_timeout,
                              retries=config.provider_retries)
    return HashingEmbedder(config.d_raw, seed=config.seed)


def make_engine(config: RunConfig) -> RewardEngine:
    oracle = RemoteSimilarity(timeout=config.provider_timeout) if config.similarity == "remote" else None
    return RewardEngine(config.weights(), oracle)


def make_dialogue_parts(config: RunConfig):
    endpoint = None
    if "remote" in (config.realizer, config.responder):
        endpoint = arena.ChatEndpoint(model=config.chat_model, timeout=config.provider_timeout)
    realizer = arena.RemoteRealizer(endpoint) if config.realizer == "remote" else arena.TemplateRealizer()
    responder = arena.RemoteResponder(endpoint) if config.responder == "remote" else arena.ScriptedResponder()
    return realizer, responder


def _stamp(config: RunConfig) -> dict:
    return dict(schema_version=MANIFEST_SCHEMA, config_hash=config.hash(), seed=config.seed)


# -- manifest ----------------------------------------------------------------------------------


def read_manifest(ws: Workspace) -> dict:
    if not ws.manifest.exists():
        return {}
    return json.loads(ws.manifest.read_text(encoding="utf-8"))


def write_manifest(ws: Workspace, manifest: dict) -> None:
    tmp = ws.manifest.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, ws.manifest)


def _record_stage(ws: Workspace, config: RunConfig, tree: ActionTree, stage: str, table_digest: str | None,
                  **info) -> None:
    manifest = read_manifest(ws)
    manifest.update(_stamp(config))
    manifest["taxonomy"] = tree.digest()
    if table_digest is not None:
        manifest["embedding_table"] = table_digest
    stages = manifest.setdefault("stages", {})
    path = ws.checkpoint(stage)
    stages[stage] = dict(file=path.name, sha256=hashlib.sha256(path.read_bytes()).hexdigest(), **info)
    write_manifest(ws, manifest)


# -- ingest ------------------------------------------------------------------------------------


def ingest(config: RunConfig, ws: Workspace | None = None) -> DatasetBundle:
    ws = ws or Workspace.of(config)
    ws.root.mkdir(parents=True, exist_ok=True)
    cases = parse_corpus(config.corpus)
    tree = make_tree(config)
    bundle = build_transitions(cases, make_engine(config), make_provider(config), tree)
    bundle.meta.update(_stamp(config))
    bundle.save(ws.bundle)
    log.info("stage=ingest cases=%d %s", len(cases),
             " ".join(f"{k}={v}" for k, v in sorted(bundle.counts().items())))
    return bundle


def load_bundle(config: RunConfig, ws: Workspace, tree: ActionTree) -> DatasetBundle:
    bundle = DatasetBundle.load(ws.require(ws.bundle, "dataset bundle"))
    if bundle.meta.get("taxonomy") != tree.digest():
        raise DependencyError("dataset bundle was built with a different taxonomy; re-run ingest")
    if bundle.meta.get("d_raw") != config.d_raw:
        raise DependencyError(f"dataset bundle has d_raw={bundle.meta.get('d_raw')}, config says {config.d_raw}")
    return bundle


# -- embeddings --------------------------------------------------------------------------------


def stage_embeddings(config: RunConfig, ws: Workspace) -> EmbeddingTable:
    tree = make_tree(config)
    table = train_embeddings(tree, config.poincare())
    meta, arrays = table.to_arrays()
    meta.update(_stamp(config), kind="embeddings", taxonomy=tree.digest(), table=table.digest())
    store.save(ws.checkpoint("embeddings"), meta, arrays)
    first = table.loss_history[0] if table.loss_history else float("nan")
    last = table.loss_history[-1] if table.loss_history else float("nan")
    log.info("stage=embeddings epochs=%d loss_first=%.6f loss_last=%.6f", len(table.loss_history), first, last)
    _record_stage(ws, config, tree, "embeddings", table.digest(), epochs=len(table.loss_history))
    return table


def load_table(ws: Workspace, tree: ActionTree) -> EmbeddingTable:
    meta, arrays = store.load(ws.require(ws.checkpoint("embeddings"), "embeddings checkpoint"))
    if meta.get("taxonomy") != tree.digest():
        raise DependencyError("embedding table was trained on a different taxonomy")
    return EmbeddingTable.from_arrays(meta, arrays)


def _check_table(meta: dict, table: EmbeddingTable, what: str) -> None:
    if meta.get("table") != table.digest():
        raise DependencyError(f"{what} was trained against a different embedding table")


# -- reward model ------------------------------------------------------------------------------


def stage_reward_model(config: RunConfig, ws: Workspace) -> tuple[RewardModel, dict]:
    tree = make_tree(config)
    table = load_table(ws, tree)
    bundle = load_bundle(config, ws, tree)
    r = bundle.rounds
    feats = path_features(table, r["path"], tree.depth, config.node_ids)
    rm_config = config.reward_model()

    def on_epoch(epoch, loss):
        log.info("stage=reward-model epoch=%d loss=%.6f", epoch, loss)

    model, report = train_reward_model(bundle.states[r["state"]], r["appraisal"], feats, r["reward"],
                                       rm_config, on_epoch=on_epoch)
    info = dict(heldout_mse=report.heldout_mse, n_train=report.n_train, n_heldout=report.n_heldout,
                final_loss=report.train_loss[-1] if report.train_loss else None)
    meta = dict(_stamp(config), kind="reward_model", taxonomy=tree.digest(), table=table.digest(),
                d_raw=config.d_raw, feat_dim=int(feats.shape[1]), config=asdict(rm_config),
                report=info, loss_history=report.train_loss)
    store.save(ws.checkpoint("reward-model"), meta, model.state_arrays())
    log.info("stage=reward-model heldout_mse=%.6f n_train=%d n_heldout=%d", report.heldout_mse,
             report.n_train, report.n_heldout)
    _record_stage(ws, config, tree, "reward-model", table.digest(), heldout_mse=report.heldout_mse)
    return model, info


def load_reward_model(ws: Workspace, table: EmbeddingTable) -> RewardModel:
    meta, arrays = store.load(ws.require(ws.checkpoint("reward-model"), "reward-model checkpoint"))
    _check_table(meta, table, "reward model")
    cfg = dict(meta["config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    model = RewardModel(meta["d_raw"], meta["feat_dim"], RewardModelConfig(**cfg))
    model.load_arrays(arrays)
    model.compressor.eval()
    model.head.eval()
    return model


# -- agent training loop -----------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    td: float
    reg: float
    hier: float
    r_hat: float


def converged(history: list[EpochRecord], patience: int, tol_loss: float, tol_value: float) -> bool:
    """Loss relative change below ``tol_loss`` and r_hat std below ``tol_value`` over the window.

    ``patience == 0`` disables early stopping.
    """
    if patience <= 0 or len(history) < patience + 1:
        return False
    window = history[-(patience + 1):]
    losses = np.array([h.loss for h in window])
    rel = np.abs(np.diff(losses)) / np.maximum(np.abs(losses[:-1]), 1e-12)
    values = np.array([h.r_hat for h in window[1:]])
    return bool(rel.max() < tol_loss and values.std() < tol_value)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def run_epochs(agent, n_rows: int, step_fn, value_fn, config: RunConfig, stage: str,
               history: list[EpochRecord], save_fn=None, stop_after: int | None = None) -> bool:
    """Train until convergence or ``config.agent_epochs``; returns True on convergence.

    Minibatch order comes from the agent's own generator, which is part of
    its checkpoint.
    """
    k = steps_per_epoch(n_rows, config.batch_size)
    ran = 0
    while len(history) < config.agent_epochs:
        if stop_after is not None and ran >= stop_after:
            return False
        perm = agent.rng.permutation(n_rows)
        reports: list[LossReport] = [step_fn(idx) for idx in np.array_split(perm, k)]
        rec = EpochRecord(len(history) + 1,
                          *(float(np.mean([getattr(r, f) for r in reports])) for f in ("total", "td", "reg", "hier")),
                          r_hat=value_fn())
        history.append(rec)
        ran += 1
        log.info("stage=%s epoch=%d loss=%.6g td=%.6g reg=%.6g hier=%.6g r_hat=%.6f", stage, rec.epoch,
                 rec.loss, rec.td, rec.reg, rec.hier, rec.r_hat)
        done = converged(history, config.patience, config.tol_loss, config.tol_value)
        if save_fn is not None:
            save_fn(done)
        if done:
            log.info("stage=%s converged epoch=%d", stage, rec.epoch)
            return True
    return False


def _save_agent(ws: Workspace, config: RunConfig, tree: ActionTree, table: EmbeddingTable, stage: str,
                agent, history: list[EpochRecord], done: bool) -> None:
    meta, arrays = agent.state()
    meta.update(_stamp(config), taxonomy=tree.digest(), table=table.digest(),
                history=[asdict(h) for h in history], converged=done)
    store.save(ws.checkpoint(stage), meta, arrays)


def load_agent(ws: Workspace, stage: str, tree: ActionTree, table: EmbeddingTable):
    meta, arrays = store.load(ws.require(ws.checkpoint(stage), f"{stage} checkpoint"))
    if meta.get("taxonomy") != tree.digest():
        raise DependencyError(f"{stage} checkpoint was trained on a different taxonomy")
    _check_table(meta, table, f"{stage} checkpoint")
    qc = QConfig.from_dict(meta["config"])
    if stage == "appraisal":
        agent = AppraisalAgent(meta["d_raw"], qc)
    else:
        agent = DialogueAgent(meta["d_raw"], tree, table, qc)
    agent.load_state(meta, arrays)
    return agent, meta


def _resume(ws, stage, tree, table, config):
    agent, meta = load_agent(ws, stage, tree, table)
    if meta.get("config_hash") != config.hash() or meta.get("seed") != config.seed:
        raise DependencyError(f"{stage} checkpoint was produced by a different config or seed")
    history = [EpochRecord(**h) for h in meta["history"]]
    return agent, history, bool(meta.get("converged"))


def stage_agent(config: RunConfig, ws: Workspace, stage: str, resume: bool = False,
                stop_after: int | None = None) -> tuple[object, list[EpochRecord]]:
    tree = make_tree(config)
    table = load_table(ws, tree)
    bundle = load_bundle(config, ws, tree)
    model = load_reward_model(ws, table)
    r, h, S = bundle.rounds, bundle.hier, bundle.states
    eval_states = S[r["state"]]
    path_feats = path_features(table, r["path"], tree.depth, model.config.node_ids)

    if stage == "appraisal":
        n_rows = bundle.n_rounds
    else:
        n_rows = bundle.n_hier
        app_agent, _ = load_agent(ws, "appraisal", tree, table)
        app_agent.eval()
    if n_rows == 0:
        raise DependencyError("dataset bundle is empty")
    horizon = steps_per_epoch(n_rows, config.batch_size) * max(1, config.agent_epochs)

    history: list[EpochRecord] = []
    done = False
    if resume and ws.checkpoint(stage).exists():
        agent, history, done = _resume(ws, stage, tree, table, config)
        log.info("stage=%s resumed epoch=%d", stage, len(history))
    elif stage == "appraisal":
        agent = AppraisalAgent(config.d_raw, config.q_config("appraisal", horizon))
    else:
        agent = DialogueAgent(config.d_raw, tree, table, config.q_config("dialogue", horizon))

    if stage == "appraisal":
        def step(idx):
            return agent.train_step(S[r["state"][idx]], r["appraisal"][idx], r["reward"][idx],
                                    S[r["next_state"][idx]], r["terminal"][idx])

        def value():
            # dialogue policy not trained yet: score the dataset act paths
            return float(np.mean(model.predict(eval_states, agent.select_batch(eval_states), path_feats)))
    else:
        def step(idx):
            return agent.train_step(S[h["state"][idx]], h["appraisal"][idx], h["prefix"][idx],
                                    h["action"][idx], h["reward"][idx], S[h["next_state"][idx]],
                                    h["next_appraisal"][idx], h["terminal"][idx])

        def value():
            return offline_policy_value(model, eval_states, app_agent, agent, table, tree.depth)

    def save(flag):
        _save_agent(ws, config, tree, table, stage, agent, history, flag)

    if not done:
        done = run_epochs(agent, n_rows, step, value, config, stage, history, save, stop_after)
    if not history:
        save(done)
    complete = done or len(history) >= config.agent_epochs
    if complete:
        _record_stage(ws, config, tree, stage, table.digest(), epochs=len(history), converged=done,
                      final_loss=history[-1].loss if history else None,
                      r_hat=history[-1].r_hat if history else None)
    return agent, history


def train(config: RunConfig, stage: str = "all", resume: bool = False, stop_after: int | None = None) -> dict:
    """Run one stage or all four in order; returns a summary per stage."""
    ws = Workspace.of(config)
    stages = STAGES if stage == "all" else (stage,)
    if stage != "all" and stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    summary = {}
    for name in stages:
        if name == "embeddings":
            table = stage_embeddings(config, ws)
            summary[name] = dict(loss_last=table.loss_history[-1] if table.loss_history else None)
        elif name == "reward-model":
            summary[name] = stage_reward_model(config, ws)[1]
        else:
            _, hist = stage_agent(config, ws, name, resume=resume, stop_after=stop_after)
            summary[name] = dict(epochs=len(hist), final_loss=hist[-1].loss if hist else None,
                                 r_hat=hist[-1].r_hat if hist else None)
    return summary


# -- simulation and evaluation -----------------------------------------------------------------


@dataclass
class LoadedRun:
    tree: ActionTree
    table: EmbeddingTable
    appraisal: AppraisalAgent
    dialogue: DialogueAgent


def load_run(config: RunConfig, ws: Workspace) -> LoadedRun:
    """Load both agents after checking every artifact against the current taxonomy and table."""
    tree = make_tree(config)
    manifest = read_manifest(ws)
    if manifest and manifest.get("taxonomy") not in (None, tree.digest()):
        raise DependencyError("manifest taxonomy hash does not match the configured taxonomy")
    table = load_table(ws, tree)
    if manifest and manifest.get("embedding_table") not in (None, table.digest()):
        raise DependencyError("manifest embedding-table hash does not match embeddings checkpoint")
    app, _ = load_agent(ws, "appraisal", tree, table)
    dia, _ = load_agent(ws, "dialogue", tree, table)
    if app.d_raw != config.d_raw or dia.d_raw != config.d_raw:
        raise DependencyError("agent checkpoints were trained with a different d_raw")
    return LoadedRun(tree, table, app.eval(), dia.eval())


def simulate(config: RunConfig, ws: Workspace | None = None, max_rounds: int | None = None):
    ws = ws or Workspace.of(config)
    run = load_run(config, ws)
    cases = parse_corpus(config.corpus)
    realizer, responder = make_dialogue_parts(config)
    rounds = config.max_rounds if max_rounds is None else max_rounds
    traces = arena.simulate_cases(run.appraisal, run.dialogue, cases, responder, realizer,
                                  make_provider(config), make_engine(config), rounds, config.workers)
    lines = [json.dumps(arena.trace_to_dict(t, run.tree), sort_keys=True) for t in traces]
    ws.traces.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    for t in traces:
        log.debug("stage=simulate case=%s rounds=%d truncated=%s aborted=%s", t.case_id, len(t),
                 t.truncated, t.aborted)
    return run, cases, traces


def evaluate(config: RunConfig, ws: Workspace | None = None, max_rounds: int | None = None) -> dict:
    ws = ws or Workspace.of(config)
    run, cases, traces = simulate(config, ws, max_rounds)
    bundle = load_bundle(config, ws, run.tree)
    model = load_reward_model(ws, run.table)
    r_hat = None
    if bundle.n_rounds:
        r_hat = offline_policy_value(model, bundle.states[bundle.rounds["state"]], run.appraisal,
                                     run.dialogue, run.table, run.tree.depth)
    report = arena.evaluate_run(traces, cases, coverage_mode=config.coverage_mode, gamma=config.mr_gamma,
                                offline_value=r_hat, config_hash=config.hash(), seed=config.seed)
    arena.write_report(report, ws.report)
    agg = report["aggregate"]
    log.info("stage=evaluate cases=%d coverage=%s mr=%s r_hat=%s", agg["cases"],
             agg["coverage_normalized"], agg["mr"], agg["offline_r_hat"])
    return report

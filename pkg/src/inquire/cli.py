"""Command-line entry point: ``inquire {ingest,train,evaluate,simulate,grad-check}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from . import config as cfgmod
from . import pipeline
from .corpus import CorpusError, DataError, ProviderError
from .nn import grad_check, random_network
from .store import ContainerError
from .taxonomy import TaxonomyError

log = logging.getLogger("inquire")

EXIT_OK = 0
EXIT_FAILED_CHECK = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DEPENDENCY = 4
EXIT_PROVIDER = 5
EXIT_BUSY = 6


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--corpus", help="corpus JSONL path (overrides the config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field; repeatable")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inquire", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build the offline dataset bundle from a corpus")
    _common(p)

    p = sub.add_parser("train", help="train one stage or the whole pipeline")
    _common(p)
    p.add_argument("--stage", default="all", choices=[*pipeline.STAGES, "all"])
    p.add_argument("--resume", action="store_true", help="continue agent stages from their checkpoints")
    p.add_argument("--stop-after", type=int, help="stop each agent stage after this many epochs in this run")

    p = sub.add_parser("evaluate", help="simulate episodes and write the metrics report")
    _common(p)
    p.add_argument("--rounds", type=int, help="round cap per episode (overrides max_rounds)")

    p = sub.add_parser("simulate", help="simulate episodes and write traces only")
    _common(p)
    p.add_argument("--rounds", type=int, help="round cap per episode (overrides max_rounds)")

    p = sub.add_parser("grad-check", help="finite-difference check on random small networks")
    _common(p)
    p.add_argument("--nets", type=int, default=25)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _config(args) -> cfgmod.RunConfig:
    overrides = cfgmod.parse_assignments(args.set)
    for key in ("seed", "out", "corpus"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "rounds", None) is not None:
        overrides["max_rounds"] = args.rounds
    return cfgmod.load(args.config, overrides)


def _grad_check(args, config) -> int:
    rng = np.random.default_rng(config.seed)
    start = time.perf_counter()
    worst = 0.0
    for i in range(args.nets):
        net = random_network(rng)
        rep = grad_check(net, rng.normal(size=(4, net.in_dim)), args.tolerance, seed=i)
        worst = max(worst, rep.max_rel_error)
        log.info("grad-check net=%d layers=%d max_rel_error=%.3e checked=%d skipped=%d", i,
                 len(net.specs), rep.max_rel_error, rep.checked, len(rep.skipped))
    ok = worst < args.tolerance
    print(json.dumps(dict(nets=args.nets, max_rel_error=worst, passed=ok,
                          seconds=round(time.perf_counter() - start, 3))))
    return EXIT_OK if ok else EXIT_FAILED_CHECK


def run(args) -> int:
    config = _config(args)
    if args.command == "grad-check":
        return _grad_check(args, config)
    ws = pipeline.Workspace.of(config)
    with pipeline.OutputLock(ws.root):
        if args.command == "ingest":
            bundle = pipeline.ingest(config, ws)
            print(json.dumps(bundle.counts(), sort_keys=True))
        elif args.command == "train":
            summary = pipeline.train(config, args.stage, resume=args.resume, stop_after=args.stop_after)
            print(json.dumps(summary, sort_keys=True))
        elif args.command == "simulate":
            _, _, traces = pipeline.simulate(config, ws)
            print(json.dumps(dict(traces=len(traces), path=str(ws.traces))))
        elif args.command == "evaluate":
            report = pipeline.evaluate(config, ws)
            print(json.dumps(report["aggregate"], sort_keys=True))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except cfgmod.ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (CorpusError, DataError, TaxonomyError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (pipeline.DependencyError, ContainerError) as exc:
        log.error("dependency error: %s", exc)
        return EXIT_DEPENDENCY
    except ProviderError as exc:
        log.error("provider error: %s", exc)
        return EXIT_PROVIDER
    except pipeline.LockError as exc:
        log.error("%s", exc)
        return EXIT_BUSY


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic corpus -> ingest -> train all stages -> evaluate, timing each step.

    python3 scripts/run_pipeline.py --config configs/synthetic.yaml --out runs/synthetic
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from inquire import config as cfgmod
from inquire import pipeline
from inquire.corpus import write_corpus
from inquire.synthetic import SyntheticSpec, behaviour_mean_reward, make_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/synthetic.yaml")
    ap.add_argument("--out", default=None)
    ap.add_argument("--cases", type=int, default=200)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)

    overrides = {k: v for k, v in (("out", args.out), ("seed", args.seed)) if v is not None}
    config = cfgmod.load(args.config, overrides)
    corpus = Path(config.out) / "corpus.jsonl"
    config = cfgmod.load(args.config, {**overrides, "corpus": str(corpus)})
    corpus.parent.mkdir(parents=True, exist_ok=True)
    cases = make_corpus(SyntheticSpec(n_cases=args.cases, seed=config.seed))
    write_corpus(cases, corpus)

    timings = {}
    t0 = time.perf_counter()
    with pipeline.OutputLock(Path(config.out)):
        pipeline.ingest(config)
        timings["ingest"] = time.perf_counter() - t0
        summary = pipeline.train(config, "all")
        timings["train"] = time.perf_counter() - t0 - timings["ingest"]
        report = pipeline.evaluate(config)
    timings["total"] = time.perf_counter() - t0
    result = dict(behaviour_mean_reward=behaviour_mean_reward(cases),
                  heldout_mse=summary["reward-model"]["heldout_mse"],
                  offline_r_hat=report["aggregate"]["offline_r_hat"],
                  max_trace_rounds=max(c["rounds"] for c in report["cases"]),
                  seconds={k: round(v, 2) for k, v in timings.items()})
    print(json.dumps(result, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()

"""Write a seeded synthetic corpus whose rewards are a known (appraisal, act) table.

    python3 scripts/make_synthetic_corpus.py runs/synthetic/corpus.jsonl --cases 200
"""

import argparse
from pathlib import Path

from inquire.corpus import write_corpus
from inquire.synthetic import SyntheticSpec, behaviour_mean_reward, best_reward, make_corpus
from inquire.taxonomy import builtin_tree


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("path")
    ap.add_argument("--cases", type=int, default=200)
    ap.add_argument("--min-rounds", type=int, default=3)
    ap.add_argument("--max-rounds", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    spec = SyntheticSpec(n_cases=args.cases, min_rounds=args.min_rounds, max_rounds=args.max_rounds,
                         seed=args.seed)
    cases = make_corpus(spec)
    Path(args.path).parent.mkdir(parents=True, exist_ok=True)
    write_corpus(cases, args.path)
    rounds = sum(len(c.rounds) for c in cases)
    print(f"wrote {len(cases)} cases / {rounds} rounds to {args.path}")
    print(f"behaviour mean reward {behaviour_mean_reward(cases):.4f}, "
          f"best attainable {best_reward(builtin_tree(), args.seed):.4f}")


if __name__ == "__main__":
    main()

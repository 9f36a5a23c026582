"""Mean and worst-client tables over algorithms x datasets x seeds.

    python scripts/run_benchmark.py har.csv vsn.csv --out bench
    python scripts/run_benchmark.py toy.csv --rounds 50 --seeds 8273 --out bench

Per dataset this calls ``ifedavg train`` for all five regimes, then prints
client-mean and worst-client F1 (seed SD in brackets) as two tables.
"""

import argparse
from pathlib import Path

from ifedavg import cli
from ifedavg.federation import ALGORITHMS
from ifedavg.metrics import read_scores, summarize


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("datasets", nargs="+", type=Path)
    ap.add_argument("--out", type=Path, default=Path("bench"))
    ap.add_argument("--rounds", type=int, default=1000)
    ap.add_argument("--seeds", default="2934384,10231938,8273,2019231,62739")
    ap.add_argument("--metric", default="f1", choices=("f1", "roc_auc", "balanced_acc"))
    args = ap.parse_args()

    rows = {}
    for path in args.datasets:
        out = args.out / path.stem
        code = cli.main(["train", "--dataset", str(path), "--algorithm", ",".join(ALGORITHMS),
                         "--rounds", str(args.rounds), "--seeds", args.seeds, "--out", str(out)])
        if code:
            raise SystemExit(code)
        for r in summarize(read_scores(out / "metrics.csv")):
            if r.metric == args.metric:
                rows[(path.stem, r.algorithm)] = r

    for title, attr in (("client mean", "mean"), ("worst client", "worst")):
        print(f"\n{args.metric}, {title}")
        print("dataset".ljust(16) + "".join(a.rjust(18) for a in ALGORITHMS))
        for path in args.datasets:
            cells = []
            for a in ALGORITHMS:
                r = rows[(path.stem, a)]
                cells.append(f"{getattr(r, attr):.3f} ({r.seed_sd:.3f})".rjust(18))
            print(path.stem.ljust(16) + "".join(cells))


if __name__ == "__main__":
    main()

"""Detection rates of injected shifts on the synthetic federation.

Trains iFedAvg once per (mutation, seed) and reports how often the injected
cell is flagged. Defaults match the acceptance fixture: 8 clients x 2000
samples, 10 features, 200 rounds, the five standard seeds.

    python scripts/run_detection.py
    python scripts/run_detection.py --rounds 100 --seeds 8273 --csv detection.csv
"""

import argparse
import csv
import sys

from ifedavg.data import SyntheticConfig, parse_shift_spec, partition_synthetic
from ifedavg.federation import DEFAULT_SEEDS, ExperimentConfig, run_experiment
from ifedavg.interpret import build_heatmap, detect_target_flip, flag_cells

SUITE = [
    ("add_bias client=3 feature=f0 delta=2.0", "b_in"),
    ("add_bias client=3 feature=f0 delta=-2.0", "b_in"),
    ("scale client=3 feature=f0 gamma=3.0", "w_in"),
    ("scale client=3 feature=f0 gamma=0.3", "w_in"),
    ("mask_conditional client=2 feature=f0 class=0", "w_in"),
    ("flip_target client=5", "w_out"),
]


def outcome(run, mutation, layer):
    if layer == "w_out":
        hm = build_heatmap(run.personal, "w_out")
        suspects = [v.client for v in detect_target_flip(hm)]
        return suspects == [mutation.client], float(hm.values[hm.clients.index(mutation.client), 0])
    hm = build_heatmap(run.personal, layer)
    i, j = hm.clients.index(mutation.client), hm.columns.index(mutation.feature)
    return bool(flag_cells(hm)[i, j]), float(hm.values[i, j])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rounds", type=int, default=200)
    ap.add_argument("--seeds", default=",".join(map(str, DEFAULT_SEEDS)))
    ap.add_argument("--clients", type=int, default=8)
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--features", type=int, default=10)
    ap.add_argument("--csv", help="also write per-run rows here")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    fixture = SyntheticConfig(args.clients, args.samples, args.features)

    rows = []
    for text, layer in SUITE:
        spec = parse_shift_spec(text)
        fout = "scalar-weight" if layer == "w_out" else "none"
        hits = 0
        for seed in seeds:
            clients = partition_synthetic(fixture, seed, spec=spec)
            cfg = ExperimentConfig(algorithm="ifedavg", rounds=args.rounds, seeds=(seed,), fout=fout)
            detected, value = outcome(run_experiment(cfg, clients).runs[0], spec.mutations[0], layer)
            hits += detected
            rows.append({"mutation": text, "seed": seed, "layer": layer, "value": value, "detected": detected})
        print(f"{text:50s} {layer:6s} detected {hits}/{len(seeds)}")
        sys.stdout.flush()

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()

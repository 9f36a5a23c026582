"""Convert the vehicle sensor network data (MATLAB release) to client CSV.

Expects the ``vehicle.mat`` file distributed with the federated multi-task
learning benchmarks: cell arrays ``X`` (one n_t x 100 matrix per sensor,
acoustic then seismic features) and ``Y`` (labels in {-1, +1}). Each of the
23 sensors becomes a client; label -1 maps to class 0 and +1 to class 1.

    python scripts/prepare_vsn.py --mat vehicle.mat --out vsn.csv
"""

import argparse
from pathlib import Path

import numpy as np
from scipy.io import loadmat

from ifedavg.data import CONTINUOUS, RawTable, write_csv


def load_vsn(path: Path) -> RawTable:
    mat = loadmat(path)
    xs, ys = np.ravel(mat["X"]), np.ravel(mat["Y"])
    values, target, clients = [], [], []
    for t, (X, y) in enumerate(zip(xs, ys)):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y).ravel()
        values.append(X)
        target.append((y > 0).astype(np.int64))
        clients += [str(t)] * len(y)
    X = np.vstack(values)
    columns = [f"f{j}" for j in range(X.shape[1])]
    return RawTable(columns, X, np.array(clients, dtype=object), np.concatenate(target),
                    {c: CONTINUOUS for c in columns})


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mat", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()
    table = load_vsn(args.mat)
    write_csv(table, args.out)
    print(f"{args.out}: {len(table.target)} rows, {len(table.client_labels())} clients, "
          f"{len(table.columns)} features")


if __name__ == "__main__":
    main()

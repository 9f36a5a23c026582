"""Convert the UCI "Human Activity Recognition Using Smartphones" release to client CSV.

Each of the 30 subjects becomes a client; the 6 activities become classes 0..5;
the 561 engineered features keep their order as f0..f560. The official
train/test partition is ignored (it splits by subject), rows are pooled.

    python scripts/prepare_har.py --zip "UCI HAR Dataset.zip" --out har.csv
    python scripts/prepare_har.py --download --out har.csv
"""

import argparse
import io
import urllib.request
import zipfile
from pathlib import Path

import numpy as np

from ifedavg.data import CONTINUOUS, RawTable, write_csv

URL = "https://archive.ics.uci.edu/ml/machine-learning-databases/00240/UCI%20HAR%20Dataset.zip"


def _open_release(raw: bytes) -> zipfile.ZipFile:
    zf = zipfile.ZipFile(io.BytesIO(raw))
    inner = [n for n in zf.namelist() if n.endswith("UCI HAR Dataset.zip")]
    return zipfile.ZipFile(io.BytesIO(zf.read(inner[0]))) if inner else zf


def _member(zf: zipfile.ZipFile, suffix: str) -> str:
    hits = [n for n in zf.namelist() if n.endswith(suffix) and "__MACOSX" not in n]
    if not hits:
        raise SystemExit(f"{suffix} not found in archive")
    return hits[0]


def load_har(zf: zipfile.ZipFile) -> RawTable:
    parts = []
    for split in ("train", "test"):
        X = np.loadtxt(zf.open(_member(zf, f"{split}/X_{split}.txt")))
        y = np.loadtxt(zf.open(_member(zf, f"{split}/y_{split}.txt")), dtype=int) - 1
        s = np.loadtxt(zf.open(_member(zf, f"{split}/subject_{split}.txt")), dtype=int)
        parts.append((X, y, s))
    X = np.vstack([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    subjects = np.concatenate([p[2] for p in parts])
    columns = [f"f{j}" for j in range(X.shape[1])]
    return RawTable(columns, X, subjects.astype(str).astype(object), y, {c: CONTINUOUS for c in columns})


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--zip", type=Path, help="local copy of the release archive")
    src.add_argument("--download", action="store_true", help=f"fetch {URL}")
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()
    raw = urllib.request.urlopen(URL).read() if args.download else args.zip.read_bytes()
    table = load_har(_open_release(raw))
    write_csv(table, args.out)
    print(f"{args.out}: {len(table.target)} rows, {len(table.client_labels())} clients, "
          f"{len(table.columns)} features, {table.n_classes} classes")


if __name__ == "__main__":
    main()

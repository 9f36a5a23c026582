"""Tabular ingestion and preprocessing for federated clients.

Pipeline order used throughout the package::

    load_csv -> apply_masks -> standardize -> impute -> inject_shift -> split

``mask_conditional`` mutations act on the raw table so that the masked cells
go through imputation; the remaining mutations act on the processed data so
their magnitudes are in standardized units.
"""

from __future__ import annotations

import csv
import logging
import math
import re
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

log = logging.getLogger(__name__)

CONTINUOUS = "continuous"
BINARY = "binary"
KINDS = (CONTINUOUS, BINARY)

CONTINUOUS_FILL = 0.0
BINARY_FILL = 0.5


class DataError(ValueError):
    """Malformed input data, schema or shift specification."""


@dataclass
class RawTable:
    """Cells are float with NaN marking a missing value."""

    columns: List[str]
    values: np.ndarray
    clients: np.ndarray  # str labels, one per row
    target: np.ndarray
    kinds: Dict[str, str]

    @property
    def n_classes(self) -> int:
        return int(self.target.max()) + 1 if self.target.size else 0

    def client_labels(self) -> List[str]:
        return ordered_labels(self.clients)

    def rows_of(self, client: str) -> np.ndarray:
        return np.flatnonzero(self.clients == client)

    def copy(self) -> "RawTable":
        return RawTable(list(self.columns), self.values.copy(), self.clients.copy(),
                        self.target.copy(), dict(self.kinds))


@dataclass
class ClientDataset:
    client: str
    X: np.ndarray
    y: np.ndarray
    features: List[str]
    kinds: List[str]
    n_classes: int
    mean: Optional[np.ndarray] = None
    sd: Optional[np.ndarray] = None
    train_idx: Optional[np.ndarray] = None
    test_idx: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.y)

    @property
    def X_train(self) -> np.ndarray:
        return self.X[self.train_idx]

    @property
    def y_train(self) -> np.ndarray:
        return self.y[self.train_idx]

    @property
    def X_test(self) -> np.ndarray:
        return self.X[self.test_idx]

    @property
    def y_test(self) -> np.ndarray:
        return self.y[self.test_idx]

    def copy(self) -> "ClientDataset":
        return replace(self, X=self.X.copy(), y=self.y.copy())


def ordered_labels(labels: Sequence[str]) -> List[str]:
    """Unique labels, numerically sorted when all labels look like integers."""
    uniq = sorted(set(labels))
    if all(re.fullmatch(r"-?\d+", u) for u in uniq):
        uniq.sort(key=int)
    return uniq


def client_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


# -- loading ---------------------------------------------------------------

@dataclass
class Schema:
    client_column: str = "client"
    target_column: str = "target"
    kinds: Dict[str, str] = field(default_factory=dict)


def load_schema(path: Union[str, Path]) -> Schema:
    """Parse ``column=kind`` lines plus ``client_column=`` / ``target_column=``."""
    schema = Schema()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "client_column":
            schema.client_column = value
        elif key == "target_column":
            schema.target_column = value
        elif value in KINDS:
            schema.kinds[key] = value
        else:
            raise DataError(f"{path}:{lineno}: unknown kind {value!r} for column {key!r}")
    return schema


def infer_kind(col: np.ndarray) -> str:
    observed = col[~np.isnan(col)]
    return BINARY if np.all((observed == 0) | (observed == 1)) else CONTINUOUS


def load_csv(path: Union[str, Path], schema: Optional[Schema] = None) -> RawTable:
    schema = schema or Schema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for required in (schema.client_column, schema.target_column):
            if required not in header:
                raise DataError(f"{path}: missing mandatory column {required!r}")
        ci = header.index(schema.client_column)
        ti = header.index(schema.target_column)
        feat_idx = [i for i in range(len(header)) if i not in (ci, ti)]
        columns = [header[i] for i in feat_idx]

        rows, clients, target = [], [], []
        for rowno, row in enumerate(reader, 1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {rowno} has {len(row)} cells, expected {len(header)}")
            client = row[ci].strip()
            if not client:
                raise DataError(f"{path}: row {rowno} has no client id")
            clients.append(client)
            try:
                t = float(row[ti])
            except ValueError:
                raise DataError(f"{path}: row {rowno}, column {schema.target_column!r}: "
                                f"cannot parse target {row[ti]!r}") from None
            if t != int(t) or t < 0:
                raise DataError(f"{path}: row {rowno}: target {row[ti]!r} is not a class index")
            target.append(int(t))
            cells = []
            for i in feat_idx:
                cell = row[i].strip()
                if cell == "":
                    cells.append(math.nan)
                    continue
                try:
                    cells.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {rowno}, column {header[i]!r}: "
                                    f"cannot parse {cell!r}") from None
            rows.append(cells)

    values = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    kinds = {}
    for j, name in enumerate(columns):
        kind = schema.kinds.get(name) or infer_kind(values[:, j])
        if kind == BINARY:
            observed = values[:, j][~np.isnan(values[:, j])]
            if not np.all((observed == 0) | (observed == 1)):
                raise DataError(f"{path}: column {name!r} is declared binary but has values outside {{0, 1}}")
        kinds[name] = kind
    return RawTable(columns, values, np.array(clients, dtype=object), np.array(target, dtype=np.int64), kinds)


def write_csv(table: RawTable, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "target"] + table.columns)
        for i in range(len(table.target)):
            cells = ["" if np.isnan(v) else repr(float(v)) for v in table.values[i]]
            w.writerow([table.clients[i], int(table.target[i])] + cells)


# -- preprocessing ---------------------------------------------------------

@dataclass
class StandardizationStats:
    mode: str
    # client label (or "*" for global) -> (mean, sd) over continuous columns, NaN for binary
    stats: Dict[str, Tuple[np.ndarray, np.ndarray]]


def _fit_stats(block: np.ndarray, cols: List[int], names: List[str], scope: str) -> Tuple[np.ndarray, np.ndarray]:
    mean = np.full(block.shape[1], np.nan)
    sd = np.full(block.shape[1], np.nan)
    for j in cols:
        observed = block[:, j][~np.isnan(block[:, j])]
        if observed.size == 0:
            raise DataError(f"no observed values for feature {names[j]!r} in {scope}")
        mean[j] = observed.mean()
        sd[j] = observed.std()
    return mean, sd


def _apply_stats(block: np.ndarray, cols: List[int], mean: np.ndarray, sd: np.ndarray) -> None:
    for j in cols:
        if sd[j] == 0:
            block[:, j] = np.where(np.isnan(block[:, j]), np.nan, 0.0)
        else:
            block[:, j] = (block[:, j] - mean[j]) / sd[j]


def standardize(
    table: RawTable, mode: str = "per-client", fit_rows: Optional[np.ndarray] = None
) -> Tuple[RawTable, StandardizationStats]:
    """Z-score continuous columns with the population SD; binary columns pass through.

    ``fit_rows`` (boolean mask over rows) restricts the rows the statistics are
    fitted on, e.g. to training rows only. Constant columns map to 0.
    """
    if mode not in ("per-client", "global"):
        raise DataError(f"unknown standardization mode {mode!r}")
    out = table.copy()
    cols = [j for j, c in enumerate(table.columns) if table.kinds[c] == CONTINUOUS]
    fit = np.ones(len(table.target), bool) if fit_rows is None else np.asarray(fit_rows, bool)
    stats: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    if mode == "global":
        mean, sd = _fit_stats(table.values[fit], cols, table.columns, "the pooled data")
        _apply_stats(out.values, cols, mean, sd)
        stats["*"] = (mean, sd)
    else:
        for label in table.client_labels():
            rows = table.clients == label
            mean, sd = _fit_stats(table.values[rows & fit], cols, table.columns, f"client {label!r}")
            block = out.values[rows]
            _apply_stats(block, cols, mean, sd)
            out.values[rows] = block
            stats[label] = (mean, sd)
    return out, StandardizationStats(mode, stats)


def impute(table: RawTable) -> RawTable:
    """Missing continuous cells become 0.0, missing binary cells 0.5."""
    out = table.copy()
    for j, name in enumerate(table.columns):
        fill = BINARY_FILL if table.kinds[name] == BINARY else CONTINUOUS_FILL
        col = out.values[:, j]
        col[np.isnan(col)] = fill
    return out


def holdout_size(n: int) -> int:
    """Hold-out size: 33% or at least 100 rows, never leaving the train set empty."""
    if n < 2:
        raise DataError(f"need at least 2 rows to split, got {n}")
    size = max(math.ceil(0.33 * n), 100)
    if size > n - 1:
        log.warning("client with %d rows: test set capped at %d", n, n - 1)
        size = n - 1
    return size


def split_train_test(n: int, seed: int, client: str) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted (train, test) index arrays, depending only on (seed, client, n)."""
    k = holdout_size(n)
    rng = np.random.default_rng([seed, 4, client_key(client)])
    test = np.sort(rng.choice(n, size=k, replace=False))
    train = np.setdiff1d(np.arange(n), test)
    return train, test


def class_weights(labels, n_classes: int) -> np.ndarray:
    """Inverse class prevalence, rescaled to sum to ``n_classes``."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    for k in range(n_classes):
        if counts[k] == 0:
            raise DataError(f"class {k} has no samples")
    inv = 1.0 / counts
    return inv * (n_classes / inv.sum())


def to_clients(table: RawTable, stats: Optional[StandardizationStats] = None) -> List[ClientDataset]:
    if np.isnan(table.values).any():
        raise DataError("table still has missing cells; impute first")
    k = table.n_classes
    kinds = [table.kinds[c] for c in table.columns]
    out = []
    for label in table.client_labels():
        rows = table.rows_of(label)
        mean = sd = None
        if stats is not None:
            mean, sd = stats.stats.get(label, stats.stats.get("*", (None, None)))
        out.append(ClientDataset(label, table.values[rows].copy(), table.target[rows].copy(),
                                 list(table.columns), kinds, k, mean, sd))
    return out


def with_split(ds: ClientDataset, seed: int) -> ClientDataset:
    train, test = split_train_test(len(ds), seed, ds.client)
    return replace(ds, train_idx=train, test_idx=test)


# -- shift injection -------------------------------------------------------

MUTATION_KINDS = ("add_bias", "scale", "flip_target", "mask_conditional")


@dataclass(frozen=True)
class Mutation:
    kind: str
    client: str
    feature: Optional[str] = None
    value: Optional[float] = None  # delta for add_bias, gamma for scale
    target_class: Optional[int] = None

    def __str__(self) -> str:
        parts = [self.kind, f"client={self.client}"]
        if self.feature is not None:
            parts.append(f"feature={self.feature}")
        if self.kind == "add_bias":
            parts.append(f"delta={self.value!r}")
        elif self.kind == "scale":
            parts.append(f"gamma={self.value!r}")
        elif self.kind == "mask_conditional":
            parts.append(f"class={self.target_class}")
        return " ".join(parts)


@dataclass
class ShiftSpec:
    mutations: List[Mutation] = field(default_factory=list)

    def pre(self) -> List[Mutation]:
        return [m for m in self.mutations if m.kind == "mask_conditional"]

    def post(self) -> List[Mutation]:
        return [m for m in self.mutations if m.kind != "mask_conditional"]

    def __bool__(self) -> bool:
        return bool(self.mutations)


_REQUIRED = {
    "add_bias": ("client", "feature", "delta"),
    "scale": ("client", "feature", "gamma"),
    "flip_target": ("client",),
    "mask_conditional": ("client", "feature", "class"),
}


def parse_mutation(line: str) -> Mutation:
    """Parse e.g. ``add_bias client=3 feature=f0 delta=2.0``."""
    tokens = line.split()
    if not tokens or tokens[0] not in MUTATION_KINDS:
        raise DataError(f"unknown mutation in {line!r}; expected one of {', '.join(MUTATION_KINDS)}")
    kind = tokens[0]
    args = {}
    for tok in tokens[1:]:
        if "=" not in tok:
            raise DataError(f"malformed argument {tok!r} in {line!r}")
        k, v = tok.split("=", 1)
        args[k] = v
    missing = [k for k in _REQUIRED[kind] if k not in args]
    extra = [k for k in args if k not in _REQUIRED[kind]]
    if missing or extra:
        raise DataError(f"{kind}: missing {missing} / unexpected {extra} in {line!r}")
    try:
        value = float(args["delta"]) if "delta" in args else float(args["gamma"]) if "gamma" in args else None
        cls = int(args["class"]) if "class" in args else None
    except ValueError:
        raise DataError(f"non-numeric argument in {line!r}") from None
    return Mutation(kind, args["client"], args.get("feature"), value, cls)


def parse_shift_spec(text: str) -> ShiftSpec:
    """One mutation per line (``;`` also separates); ``#`` starts a comment."""
    muts = []
    for line in text.replace(";", "\n").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            muts.append(parse_mutation(line))
    return ShiftSpec(muts)


def load_shift_spec(arg: str) -> ShiftSpec:
    """``@path`` reads a file, anything else is parsed inline."""
    if arg.startswith("@"):
        return parse_shift_spec(Path(arg[1:]).read_text(encoding="utf-8"))
    return parse_shift_spec(arg)


def _feature_index(features: Sequence[str], ref: str) -> int:
    if ref in features:
        return list(features).index(ref)
    if re.fullmatch(r"\d+", ref) and int(ref) < len(features):
        return int(ref)
    raise DataError(f"unknown feature {ref!r}")


def validate_spec(spec: ShiftSpec, clients: Sequence[str], features: Sequence[str], n_classes: int) -> None:
    for m in spec.mutations:
        if m.client not in clients:
            raise DataError(f"{m}: unknown client {m.client!r}")
        if m.feature is not None:
            _feature_index(features, m.feature)
        if m.target_class is not None and not 0 <= m.target_class < n_classes:
            raise DataError(f"{m}: class {m.target_class} outside [0, {n_classes})")


def apply_masks(table: RawTable, spec: ShiftSpec) -> RawTable:
    """Apply ``mask_conditional`` mutations: cells become missing for rows of the class."""
    validate_spec(ShiftSpec(spec.pre()), table.client_labels(), table.columns, table.n_classes)
    out = table.copy()
    for m in spec.pre():
        j = _feature_index(table.columns, m.feature)
        rows = (table.clients == m.client) & (table.target == m.target_class)
        out.values[rows, j] = np.nan
    return out


def flip_labels(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Reverse class order; for binary labels this is ``1 - y``."""
    return (n_classes - 1) - y


def inject_shift(clients: List[ClientDataset], spec: ShiftSpec) -> List[ClientDataset]:
    """Apply add_bias / scale / flip_target in listed order, returning new datasets."""
    if not clients:
        return []
    labels = [c.client for c in clients]
    validate_spec(ShiftSpec(spec.post()), labels, clients[0].features, clients[0].n_classes)
    out = [c.copy() for c in clients]
    by_label = {c.client: c for c in out}
    for m in spec.post():
        ds = by_label[m.client]
        if m.kind == "flip_target":
            ds.y = flip_labels(ds.y, ds.n_classes)
            continue
        j = _feature_index(ds.features, m.feature)
        if m.kind == "add_bias":
            ds.X[:, j] += m.value
        else:
            ds.X[:, j] *= m.value
    return out


def prepare_clients(
    table: RawTable,
    mode: str = "per-client",
    spec: Optional[ShiftSpec] = None,
    fit_train_only_seed: Optional[int] = None,
) -> List[ClientDataset]:
    """Full preprocessing pipeline from a raw table to client datasets (no split yet).

    With ``fit_train_only_seed`` the standardization statistics are fitted on
    the training rows of that seed's split only.
    """
    spec = spec or ShiftSpec()
    table = apply_masks(table, spec)
    fit_rows = None
    if fit_train_only_seed is not None:
        fit_rows = np.zeros(len(table.target), bool)
        for label in table.client_labels():
            rows = table.rows_of(label)
            train, _ = split_train_test(len(rows), fit_train_only_seed, label)
            fit_rows[rows[train]] = True
    std, stats = standardize(table, mode, fit_rows)
    return inject_shift(to_clients(impute(std), stats), spec)


# -- synthetic fixture -----------------------------------------------------

@dataclass
class SyntheticConfig:
    n_clients: int = 8
    n_samples: int = 2000
    n_features: int = 10
    weights: Optional[Sequence[float]] = None
    intercept: float = 0.0

    def logistic_weights(self) -> np.ndarray:
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.n_features,):
                raise DataError(f"expected {self.n_features} logistic weights, got {w.shape}")
            return w
        j = np.arange(self.n_features)
        return np.where(j % 2 == 0, 1.0, -1.0) * 2.0 / np.sqrt(1.0 + j)


def synthetic_table(cfg: SyntheticConfig, seed: int) -> RawTable:
    """IID standard-normal features with logistic labels, same law for every client."""
    if cfg.n_clients < 1:
        raise DataError("need at least one client")
    beta = cfg.logistic_weights()
    blocks, ys, clients = [], [], []
    for c in range(cfg.n_clients):
        rng = np.random.default_rng([seed, 5, c])
        X = rng.standard_normal((cfg.n_samples, cfg.n_features))
        p = 1.0 / (1.0 + np.exp(-(X @ beta + cfg.intercept)))
        ys.append((rng.random(cfg.n_samples) < p).astype(np.int64))
        blocks.append(X)
        clients += [str(c)] * cfg.n_samples
    columns = [f"f{j}" for j in range(cfg.n_features)]
    return RawTable(columns, np.vstack(blocks), np.array(clients, dtype=object),
                    np.concatenate(ys), {c: CONTINUOUS for c in columns})


def partition_synthetic(cfg: SyntheticConfig, seed: int, mode: str = "per-client",
                        spec: Optional[ShiftSpec] = None) -> List[ClientDataset]:
    return prepare_clients(synthetic_table(cfg, seed), mode, spec)

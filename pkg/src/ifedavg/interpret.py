"""Heatmaps of learned personal layers and the two 2-SD significance rules.

Rule 1 ('O', per cell): a client's value differs from its column mean by
more than ``threshold`` population SDs of that column.

Rule 2 ('x', per column): the column's cross-client SD differs from the
mean of all column SDs by more than ``threshold`` SDs of those column SDs.
"""

from __future__ import annotations

import csv
import html
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .nn import PersonalParams

LAYERS = ("b_in", "w_in", "b_out", "w_out")

# relative slack on the strict inequality; a lone outlier among 5 sits at exactly 2 SD
# and must not be flagged because of rounding
BOUNDARY_RTOL = 1e-9


@dataclass
class LayerHeatmap:
    layer: str
    values: np.ndarray  # clients x columns
    clients: List[str]
    columns: List[str]

    @property
    def center(self) -> float:
        return 0.0 if self.layer.startswith("b") else 1.0


@dataclass
class SignificanceFlags:
    cells: np.ndarray  # bool, clients x columns
    columns: np.ndarray  # bool, one per column
    threshold: float

    def flagged_cells(self) -> List[tuple]:
        return [tuple(int(i) for i in ij) for ij in np.argwhere(self.cells)]


@dataclass
class FlipVerdict:
    client: str
    components: List[int]
    values: List[float]


def build_heatmap(personal: Mapping[str, PersonalParams], layer: str,
                  columns: Optional[Sequence[str]] = None) -> LayerHeatmap:
    """Stack one personal vector per client into a clients x columns matrix."""
    if layer not in LAYERS:
        raise ValueError(f"unknown layer {layer!r}")
    if not personal:
        raise ValueError("no personal layers given")
    clients = list(personal)
    rows = [np.asarray(getattr(personal[c], layer), dtype=float) for c in clients]
    shapes = {r.shape for r in rows}
    if len(shapes) != 1:
        raise ValueError(f"clients disagree on {layer} shape: {sorted(shapes)}")
    width = rows[0].shape[0]
    if columns is None or len(columns) != width:
        prefix = "f" if layer.endswith("_in") else "class"
        columns = ["w" if width == 1 and layer == "w_out" else f"{prefix}{j}" for j in range(width)]
    return LayerHeatmap(layer, np.vstack(rows), clients, list(columns))


def average_heatmaps(heatmaps: Sequence[LayerHeatmap]) -> LayerHeatmap:
    """Element-wise mean over runs (e.g. seeds) of the same layer and federation."""
    if not heatmaps:
        raise ValueError("no heatmaps to average")
    first = heatmaps[0]
    for hm in heatmaps[1:]:
        if hm.layer != first.layer or hm.clients != first.clients or hm.columns != first.columns:
            raise ValueError("heatmaps differ in layer, clients or columns")
    return LayerHeatmap(first.layer, np.mean([hm.values for hm in heatmaps], axis=0),
                        list(first.clients), list(first.columns))


def flag_cells(hm: LayerHeatmap, threshold: float = 2.0) -> np.ndarray:
    v = hm.values
    if v.shape[0] < 2:
        raise ValueError("cell flags need at least two clients")
    mu = v.mean(axis=0)
    sd = v.std(axis=0)
    return (np.abs(v - mu) > threshold * sd * (1 + BOUNDARY_RTOL)) & (sd > 0)


def flag_columns(hm: LayerHeatmap, threshold: float = 2.0) -> np.ndarray:
    v = hm.values
    if v.shape[0] < 2:
        raise ValueError("column flags need at least two clients")
    if v.shape[1] < 2:
        raise ValueError("column flags need at least two columns")
    col_sd = v.std(axis=0)
    spread = col_sd.std()
    if spread == 0:
        return np.zeros(v.shape[1], bool)
    return np.abs(col_sd - col_sd.mean()) > threshold * spread * (1 + BOUNDARY_RTOL)


def significance(hm: LayerHeatmap, threshold: float = 2.0) -> SignificanceFlags:
    cols = flag_columns(hm, threshold) if hm.values.shape[1] >= 2 else np.zeros(hm.values.shape[1], bool)
    return SignificanceFlags(flag_cells(hm, threshold), cols, threshold)


def detect_target_flip(hm: LayerHeatmap, trained: bool = True) -> List[FlipVerdict]:
    """Clients with any negative output weight."""
    if hm.layer != "w_out":
        raise ValueError(f"flip detection needs the w_out heatmap, got {hm.layer}")
    if not trained:
        raise ValueError("w_out was not trained in this run; nothing to detect")
    out = []
    for i, client in enumerate(hm.clients):
        neg = np.flatnonzero(hm.values[i] < 0)
        if neg.size:
            out.append(FlipVerdict(client, neg.tolist(), hm.values[i, neg].tolist()))
    return out


# -- files -----------------------------------------------------------------

def atomic_write(path: Union[str, Path], text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(rows: Sequence[Sequence[str]]) -> str:
    import io

    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def heatmap_csv(hm: LayerHeatmap) -> str:
    rows = [["client"] + hm.columns]
    rows += [[c] + [repr(float(x)) for x in hm.values[i]] for i, c in enumerate(hm.clients)]
    return _csv_text(rows)


def flags_csv(hm: LayerHeatmap, flags: SignificanceFlags) -> str:
    rows = [["client"] + hm.columns, ["column"] + ["x" if f else "" for f in flags.columns]]
    rows += [[c] + ["O" if f else "" for f in flags.cells[i]] for i, c in enumerate(hm.clients)]
    return _csv_text(rows)


def read_heatmap_csv(path: Union[str, Path], layer: Optional[str] = None) -> LayerHeatmap:
    path = Path(path)
    if layer is None:
        stem = path.stem
        layer = next((l for l in LAYERS if stem.endswith(l)), stem)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    values = np.array([[float(x) for x in r[1:]] for r in body], dtype=float).reshape(len(body), len(header) - 1)
    return LayerHeatmap(layer, values, [r[0] for r in body], header[1:])


def read_flags_csv(path: Union[str, Path], threshold: float = 2.0) -> SignificanceFlags:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    cols = np.array([x == "x" for x in rows[1][1:]], dtype=bool)
    cells = np.array([[x == "O" for x in r[1:]] for r in rows[2:]], dtype=bool).reshape(len(rows) - 2, len(cols))
    return SignificanceFlags(cells, cols, threshold)


def _color(value: float, center: float, scale: float) -> str:
    """Blue below center, red above, white at center."""
    t = 0.0 if scale == 0 else max(-1.0, min(1.0, (value - center) / scale))
    if t >= 0:
        r, g, b = 255, round(255 * (1 - t)), round(255 * (1 - t))
    else:
        r, g, b = round(255 * (1 + t)), round(255 * (1 + t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(hm: LayerHeatmap, flags: Optional[SignificanceFlags] = None, cell: int = 28) -> str:
    n_rows, n_cols = hm.values.shape
    left = 10 + 7 * max((len(c) for c in hm.clients), default=4)
    top = 40
    width = left + cell * n_cols + 10
    height = top + cell * n_rows + 10
    dev = np.abs(hm.values - hm.center)
    scale = float(dev.max()) if dev.size else 0.0
    esc = html.escape
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
        f"<title>{esc(hm.layer)}</title>",
    ]
    for j, name in enumerate(hm.columns):
        x = left + j * cell + cell / 2
        mark = " x" if flags is not None and flags.columns[j] else ""
        out.append(f'<text x="{x:.1f}" y="{top - 8}" text-anchor="middle">{esc(name)}{mark}</text>')
    for i, client in enumerate(hm.clients):
        y = top + i * cell
        out.append(f'<text x="{left - 4}" y="{y + cell / 2 + 3:.1f}" text-anchor="end">{esc(client)}</text>')
        for j in range(n_cols):
            x = left + j * cell
            v = hm.values[i, j]
            flagged = flags is not None and flags.cells[i, j]
            stroke = ' stroke="#000000" stroke-width="2"' if flagged else ""
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                       f'fill="{_color(v, hm.center, scale)}"{stroke}><title>{v!r}</title></rect>')
            if flagged:
                out.append(f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 3:.1f}" text-anchor="middle">O</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_report(hm: LayerHeatmap, flags: SignificanceFlags, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write ``heatmap_<layer>.csv``, ``flags_<layer>.csv`` and ``heatmap_<layer>.svg``."""
    if flags.cells.shape != hm.values.shape or flags.columns.shape != (hm.values.shape[1],):
        raise ValueError("flags and heatmap shapes differ")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "heatmap": out_dir / f"heatmap_{hm.layer}.csv",
        "flags": out_dir / f"flags_{hm.layer}.csv",
        "svg": out_dir / f"heatmap_{hm.layer}.svg",
    }
    atomic_write(paths["heatmap"], heatmap_csv(hm))
    atomic_write(paths["flags"], flags_csv(hm, flags))
    atomic_write(paths["svg"], heatmap_svg(hm, flags))
    return paths

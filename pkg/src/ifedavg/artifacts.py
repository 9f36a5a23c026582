"""On-disk layout of a training run.

::

    <out>/<seed>/<algorithm>/shared.npz          final server model
    <out>/<seed>/<algorithm>/personal_<layer>.csv per-client personal vectors (iFedAvg)
    <out>/<seed>/<algorithm>/trained_layers.txt  which personal vectors were trainable
    <out>/<seed>/<algorithm>/metrics.csv
"""

from __future__ import annotations

import io
import zipfile
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from .interpret import LAYERS, LayerHeatmap, atomic_write, build_heatmap, heatmap_csv, read_heatmap_csv
from .metrics import write_scores
from .federation import RunArtifacts, SeedRun
from .nn import SharedParams


def run_dir(out: Union[str, Path], seed: int, algorithm: str) -> Path:
    return Path(out) / str(seed) / algorithm


def _npz_bytes(arrays: Dict[str, np.ndarray]) -> bytes:
    """npz archive with fixed member timestamps, so identical arrays give identical bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    return buf.getvalue()


def _atomic_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def write_seed_run(run: SeedRun, out: Union[str, Path], algorithm: str,
                   features: List[str]) -> Path:
    d = run_dir(out, run.seed, algorithm)
    d.mkdir(parents=True, exist_ok=True)
    _atomic_bytes(d / "shared.npz", _npz_bytes(run.shared.arrays()))
    for label, model in run.apfl_local.items():
        _atomic_bytes(d / f"apfl_local_{label}.npz", _npz_bytes(model.arrays()))
    for label, model in run.client_models.items():
        _atomic_bytes(d / f"local_{label}.npz", _npz_bytes(model.arrays()))
    if run.personal:
        first = next(iter(run.personal.values()))
        trained = [l for l in LAYERS if getattr(first, f"train_{l}")]
        for layer in LAYERS:
            cols = features if layer.endswith("_in") else None
            atomic_write(d / f"personal_{layer}.csv", heatmap_csv(build_heatmap(run.personal, layer, cols)))
        atomic_write(d / "trained_layers.txt", "\n".join(trained) + "\n")
    tmp = d / ".metrics.csv.tmp"
    write_scores(run.scores, tmp)
    tmp.replace(d / "metrics.csv")
    return d


def write_artifacts(art: RunArtifacts, out: Union[str, Path], features: List[str]) -> List[Path]:
    return [write_seed_run(r, out, art.config.algorithm, features) for r in art.runs]


def has_personal(d: Union[str, Path]) -> bool:
    return (Path(d) / "personal_b_in.csv").exists()


def read_personal(d: Union[str, Path], layer: str) -> LayerHeatmap:
    path = Path(d) / f"personal_{layer}.csv"
    if not path.exists():
        raise FileNotFoundError(f"no personal layers in run {d}")
    return read_heatmap_csv(path, layer)


def trained_layers(d: Union[str, Path]) -> List[str]:
    path = Path(d) / "trained_layers.txt"
    if not path.exists():
        return []
    return [l for l in path.read_text(encoding="utf-8").split() if l]


def read_shared(d: Union[str, Path]) -> SharedParams:
    with np.load(Path(d) / "shared.npz") as z:
        return SharedParams(**{k: z[k] for k in z.files})

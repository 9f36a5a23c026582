import importlib.util
import io
import zipfile
from pathlib import Path

import numpy as np
from scipy.io import savemat

from ifedavg.data import load_csv, write_csv

SCRIPTS = Path(__file__).resolve().parent.parent / "scripts"


def load(name):
    spec = importlib.util.spec_from_file_location(name, SCRIPTS / f"{name}.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_har_adapter(tmp_path):
    har = load("prepare_har")
    rng = np.random.default_rng(0)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for split, subjects in (("train", [1, 1, 3]), ("test", [2, 2])):
            n = len(subjects)
            zf.writestr(f"UCI HAR Dataset/{split}/X_{split}.txt",
                        "\n".join(" ".join(f"{v:.6f}" for v in row) for row in rng.normal(size=(n, 4))))
            zf.writestr(f"UCI HAR Dataset/{split}/y_{split}.txt", "\n".join(str(1 + i % 6) for i in range(n)))
            zf.writestr(f"UCI HAR Dataset/{split}/subject_{split}.txt", "\n".join(map(str, subjects)))
    table = har.load_har(har._open_release(buf.getvalue()))
    assert table.client_labels() == ["1", "2", "3"]
    assert table.values.shape == (5, 4) and table.target.min() == 0
    write_csv(table, tmp_path / "har.csv")
    assert load_csv(tmp_path / "har.csv").values.shape == (5, 4)


def test_vsn_adapter(tmp_path):
    vsn = load("prepare_vsn")
    rng = np.random.default_rng(1)
    X = np.empty((1, 2), dtype=object)
    Y = np.empty((1, 2), dtype=object)
    for t, n in enumerate((3, 4)):
        X[0, t] = rng.normal(size=(n, 5))
        Y[0, t] = np.where(rng.random((n, 1)) > 0.5, 1, -1)
    savemat(tmp_path / "vehicle.mat", {"X": X, "Y": Y})
    table = vsn.load_vsn(tmp_path / "vehicle.mat")
    assert table.client_labels() == ["0", "1"]
    assert table.values.shape == (7, 5)
    assert set(np.unique(table.target)) <= {0, 1}

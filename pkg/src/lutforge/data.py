"""Dataset ingestion, the LFTD raw-tensor format, and evaluation metrics."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .util import atomic_write_bytes, atomic_write_text

LFTD_MAGIC = b"LFTD"


class DataError(ValueError):
    """Bad or inconsistent input data (CLI exit code 3)."""


@dataclass
class DatasetSpec:
    source: str
    format: str = "csv"  # "csv" or "lftd"
    feature_columns: list | None = None
    label_column: str | None = None
    mode: str = "classification"
    n_classes: int | None = None
    split_seed: int = 0
    val_fraction: float = 0.10
    test_fraction: float = 0.0
    standardize: bool = True
    labels_source: str | None = None  # LFTD labels file when format == "lftd"


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    mode: str = "classification"
    n_classes: int = 0
    feature_names: list = field(default_factory=list)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    split_indices: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return int(np.prod(self.x_train.shape[1:]))


# -- LFTD ------------------------------------------------------------------

def lftd_dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    head = LFTD_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def lftd_loads(data: bytes) -> np.ndarray:
    if data[:4] != LFTD_MAGIC:
        raise DataError("not an LFTD tensor file (bad magic)")
    try:
        (ndim,) = struct.unpack_from("<B", data, 4)
        dims = struct.unpack_from(f"<{ndim}I", data, 5)
    except struct.error as exc:
        raise DataError("truncated LFTD header") from exc
    off = 5 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(data) - off != 4 * count:
        raise DataError(f"LFTD payload has {len(data) - off} bytes, expected {4 * count}")
    return np.frombuffer(data, dtype="<f4", offset=off).reshape(dims).astype(np.float32)


def save_lftd(path, arr) -> None:
    atomic_write_bytes(path, lftd_dumps(arr))


def load_lftd(path) -> np.ndarray:
    return lftd_loads(Path(path).read_bytes())


# -- CSV -------------------------------------------------------------------

def read_csv(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray, list, list]:
    """Parse a headered CSV into (features, raw labels, feature names, label values)."""
    path = Path(spec.source)
    if not path.exists():
        raise DataError(f"dataset file {path} does not exist")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        label = spec.label_column or header[-1]
        if label not in header:
            raise DataError(f"label column {label!r} not in header {header}")
        feats = spec.feature_columns or [h for h in header if h != label]
        missing = [f for f in feats if f not in header]
        if missing:
            raise DataError(f"feature columns {missing} not in header")
        fidx = [header.index(f) for f in feats]
        lidx = header.index(label)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[k]) for k in fidx])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric or missing feature value") from None
            if not all(math.isfinite(v) for v in rows[-1]):
                raise DataError(f"{path}:{lineno}: non-finite feature value")
            labels.append(row[lidx].strip())
    if not rows:
        raise DataError(f"{path} has no data rows")
    return np.asarray(rows, dtype=np.float64), np.asarray(labels), feats, header


def encode_labels(raw: np.ndarray, spec: DatasetSpec) -> tuple[np.ndarray, int]:
    if spec.mode == "regression":
        try:
            return raw.astype(np.float64), 0
        except ValueError:
            raise DataError("regression labels must be numeric") from None
    values = sorted(set(raw.tolist()), key=_label_key)
    if spec.n_classes is not None and len(values) != spec.n_classes:
        raise DataError(f"label column has {len(values)} classes, expected {spec.n_classes}")
    lookup = {v: k for k, v in enumerate(values)}
    return np.asarray([lookup[v] for v in raw.tolist()], dtype=np.int64), len(values)


def _label_key(v):
    try:
        return (0, float(v), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(v))


# -- splitting -------------------------------------------------------------

def split_indices(n: int, val_fraction: float, test_fraction: float, seed: int) -> dict:
    if not 0 < val_fraction < 1:
        raise DataError("val_fraction must be in (0, 1)")
    if not 0 <= test_fraction < 1 or val_fraction + test_fraction >= 1:
        raise DataError("test_fraction must be in [0, 1) and leave training data")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    rest = n - n_test
    n_val = max(1, int(round(rest * val_fraction))) if rest > 1 else 0
    if rest - n_val < 1:
        raise DataError(f"{n} rows are too few to split")
    return {"test": np.sort(perm[:n_test]), "val": np.sort(perm[n_test:n_test + n_val]),
            "train": np.sort(perm[n_test + n_val:])}


def check_disjoint(splits: dict) -> None:
    names = list(splits)
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            shared = np.intersect1d(splits[names[a]], splits[names[b]])
            if shared.size:
                raise DataError(f"splits {names[a]!r} and {names[b]!r} share {shared.size} rows "
                                f"(first: row {int(shared[0])})")


def build_dataset(x, y, spec: DatasetSpec, n_classes: int, feature_names=()) -> Dataset:
    splits = split_indices(len(x), spec.val_fraction, spec.test_fraction, spec.split_seed)
    check_disjoint(splits)
    mean = std = None
    if spec.standardize:
        flat = x[splits["train"]].reshape(len(splits["train"]), -1)
        mean = flat.mean(axis=0).reshape(x.shape[1:])
        std = flat.std(axis=0).reshape(x.shape[1:])
        std = np.where(std > 0, std, 1.0)
        x = (x - mean) / std
    pick = lambda name: (x[splits[name]], y[splits[name]])  # noqa: E731
    xt, yt = pick("train")
    xv, yv = pick("val")
    xs, ys = pick("test") if splits["test"].size else (None, None)
    return Dataset(xt, yt, xv, yv, xs, ys, spec.mode, n_classes, list(feature_names), mean, std, splits)


def ingest(spec: DatasetSpec, cache_dir=None) -> Dataset:
    """Load, encode, split and standardize a dataset; optionally persist a cache."""
    if spec.format == "csv":
        x, raw, feats, _ = read_csv(spec)
    elif spec.format == "lftd":
        x = load_lftd(spec.source).astype(np.float64)
        if spec.labels_source is None:
            raise DataError("LFTD datasets need a labels file")
        raw = load_lftd(spec.labels_source).reshape(-1)
        if spec.mode == "classification":
            raw = raw.astype(np.int64).astype(str)
        if len(raw) != len(x):
            raise DataError(f"{len(x)} samples but {len(raw)} labels")
        feats = [f"x{k}" for k in range(int(np.prod(x.shape[1:])))]
    else:
        raise DataError(f"unknown dataset format {spec.format!r}")
    y, n_classes = encode_labels(raw, spec)
    ds = build_dataset(x, y, spec, n_classes, feats)
    if cache_dir is not None:
        write_cache(ds, spec, cache_dir)
    return ds


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_cache(ds: Dataset, spec: DatasetSpec, cache_dir) -> Path:
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    files = {}
    arrays = {"x_train": ds.x_train, "y_train": ds.y_train, "x_val": ds.x_val, "y_val": ds.y_val}
    if ds.x_test is not None:
        arrays.update(x_test=ds.x_test, y_test=ds.y_test)
    for name, arr in arrays.items():
        blob = lftd_dumps(arr)
        atomic_write_bytes(cache / f"{name}.lftd", blob)
        files[name] = _sha(blob)
    meta = {"spec": asdict(spec), "mode": ds.mode, "n_classes": ds.n_classes,
            "feature_names": ds.feature_names, "checksums": files,
            "mean": None if ds.mean is None else np.asarray(ds.mean).tolist(),
            "std": None if ds.std is None else np.asarray(ds.std).tolist(),
            "splits": {k: v.tolist() for k, v in ds.split_indices.items()}}
    atomic_write_text(cache / "dataset.json", json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return cache


def load_cache(cache_dir) -> Dataset:
    cache = Path(cache_dir)
    meta_path = cache / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"{cache} is not a dataset cache (no dataset.json)")
    meta = json.loads(meta_path.read_text())
    arrays = {}
    for name, digest in meta["checksums"].items():
        blob = (cache / f"{name}.lftd").read_bytes()
        if _sha(blob) != digest:
            raise DataError(f"checksum mismatch for {name}.lftd; re-run ingest")
        arrays[name] = lftd_loads(blob).astype(np.float64)
    splits = {k: np.asarray(v, dtype=np.int64) for k, v in meta["splits"].items()}
    check_disjoint(splits)
    label = (lambda a: a.astype(np.int64)) if meta["mode"] == "classification" else (lambda a: a)
    return Dataset(arrays["x_train"], label(arrays["y_train"]), arrays["x_val"], label(arrays["y_val"]),
                   arrays.get("x_test"), label(arrays["y_test"]) if "y_test" in arrays else None,
                   meta["mode"], meta["n_classes"], meta["feature_names"],
                   None if meta["mean"] is None else np.asarray(meta["mean"]),
                   None if meta["std"] is None else np.asarray(meta["std"]), splits)


# -- metrics ---------------------------------------------------------------

def metric_accuracy(outputs, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    outputs = np.asarray(outputs)
    labels = np.asarray(labels)
    if outputs.shape[0] == 0:
        raise ValueError("accuracy of an empty batch is undefined")
    if outputs.shape[0] != labels.shape[0]:
        raise ValueError(f"{outputs.shape[0]} outputs but {labels.shape[0]} labels")
    return float(np.mean(np.argmax(outputs, axis=-1) == labels))


def standard_error(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return float("nan")
    return float(x.std(ddof=1) / math.sqrt(x.size))


def separation_from_stats(mu_k, mu_p, se_k, se_p) -> float:
    denom = (se_k + se_p) / 2
    if not denom or not math.isfinite(denom):
        return float("nan")
    return (mu_k - mu_p) / denom


def metric_separation(counts_k, counts_p) -> float:
    """Separation power of two count distributions; NaN when undefined."""
    counts_k = np.asarray(counts_k, dtype=np.float64)
    counts_p = np.asarray(counts_p, dtype=np.float64)
    if counts_k.size == 0 or counts_p.size == 0:
        raise ValueError("separation power needs two non-empty groups")
    return separation_from_stats(counts_k.mean(), counts_p.mean(),
                                 standard_error(counts_k), standard_error(counts_p))

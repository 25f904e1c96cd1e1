"""Multimodal tabular datasets with explicit observed/missing flags."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
# code stored for a category never seen in the training fold
UNKNOWN = -1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSchema:
    name: str
    kind: str = NUMERICAL
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (NUMERICAL, CATEGORICAL):
            raise DatasetError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.kind == CATEGORICAL and len(self.categories) < 2:
            raise DatasetError(f"categorical feature {self.name!r} needs at least 2 categories")

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.is_categorical:
            d["categories"] = list(self.categories)
        return d


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Modality:
    """One group of features: ``values`` [N, width] and ``observed`` [N, width].

    Categorical cells hold the category index. Values at unobserved cells are
    placeholders and carry no meaning.
    """

    name: str
    schema: tuple[FeatureSchema, ...]
    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "schema", tuple(self.schema))
        values = np.asarray(self.values, dtype=np.float64)
        observed = np.asarray(self.observed, dtype=bool)
        if values.ndim != 2 or values.shape != observed.shape:
            raise DatasetError(f"modality {self.name!r}: values {values.shape} vs observed {observed.shape}")
        if values.shape[1] != len(self.schema):
            raise DatasetError(
                f"modality {self.name!r}: grid width {values.shape[1]} != schema length {len(self.schema)}")
        names = [f.name for f in self.schema]
        if len(set(names)) != len(names):
            raise DatasetError(f"modality {self.name!r}: duplicate feature names")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "observed", _readonly(observed))

    @property
    def width(self) -> int:
        return len(self.schema)

    @property
    def present(self) -> np.ndarray:
        """Per-sample flag: at least one feature observed."""
        return self.observed.any(axis=1)

    def subset(self, indices) -> "Modality":
        idx = np.asarray(indices, dtype=np.intp)
        return Modality(self.name, self.schema, self.values[idx], self.observed[idx])

    def replace(self, values=None, observed=None) -> "Modality":
        return Modality(self.name, self.schema,
                        self.values if values is None else values,
                        self.observed if observed is None else observed)


@dataclass(frozen=True)
class Batch:
    values: list[np.ndarray]
    observed: list[np.ndarray]

    @property
    def size(self) -> int:
        return self.values[0].shape[0]


@dataclass(frozen=True)
class MultimodalDataset:
    modalities: tuple[Modality, ...]
    labels: np.ndarray
    class_names: tuple[str, ...]
    sample_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        labels = np.asarray(self.labels, dtype=np.int64)
        n = labels.shape[0]
        for m in self.modalities:
            if m.values.shape[0] != n:
                raise DatasetError(f"modality {m.name!r} has {m.values.shape[0]} samples, labels have {n}")
        if n and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise DatasetError("label index outside class_names")
        ids = tuple(self.sample_ids) if self.sample_ids else tuple(str(i) for i in range(n))
        if len(ids) != n:
            raise DatasetError("sample_ids length differs from sample count")
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "sample_ids", ids)

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def widths(self) -> list[int]:
        return [m.width for m in self.modalities]

    @property
    def schemas(self) -> list[tuple[FeatureSchema, ...]]:
        return [m.schema for m in self.modalities]

    def subset(self, indices) -> "MultimodalDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return MultimodalDataset(
            tuple(m.subset(idx) for m in self.modalities),
            self.labels[idx], self.class_names,
            tuple(self.sample_ids[i] for i in idx))

    def with_observed(self, observed: Sequence[np.ndarray]) -> "MultimodalDataset":
        mods = tuple(m.replace(observed=o) for m, o in zip(self.modalities, observed))
        return MultimodalDataset(mods, self.labels, self.class_names, self.sample_ids)

    def with_modalities(self, modalities: Sequence[Modality]) -> "MultimodalDataset":
        return MultimodalDataset(tuple(modalities), self.labels, self.class_names, self.sample_ids)

    def batch(self, indices=None) -> Batch:
        if indices is None:
            return Batch([m.values for m in self.modalities], [m.observed for m in self.modalities])
        idx = np.asarray(indices, dtype=np.intp)
        return Batch([m.values[idx] for m in self.modalities], [m.observed[idx] for m in self.modalities])

    def observed_counts(self) -> np.ndarray:
        """Observed feature count per sample across all modalities."""
        return np.sum([m.observed.sum(axis=1) for m in self.modalities], axis=0)

    def concatenated(self, name: str = "all") -> "MultimodalDataset":
        """Single-modality view with every feature side by side (early fusion)."""
        schema = []
        for m in self.modalities:
            schema.extend(FeatureSchema(f"{m.name}.{f.name}", f.kind, f.categories) for f in m.schema)
        mod = Modality(name, tuple(schema),
                       np.concatenate([m.values for m in self.modalities], axis=1),
                       np.concatenate([m.observed for m in self.modalities], axis=1))
        return self.with_modalities([mod])

    def single(self, i: int) -> "MultimodalDataset":
        return self.with_modalities([self.modalities[i]])


# ---------------------------------------------------------------------- preprocessing


@dataclass
class Preprocessor:
    """Min-max bounds and category vocabularies fitted on a training fold."""

    mins: list[np.ndarray]
    maxs: list[np.ndarray]
    vocab: list[dict[int, set[int]]]

    def to_dict(self) -> dict:
        return {"mins": [m.tolist() for m in self.mins], "maxs": [m.tolist() for m in self.maxs],
                "vocab": [{str(j): sorted(v) for j, v in voc.items()} for voc in self.vocab]}

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessor":
        return cls([np.array(m, dtype=float) for m in d["mins"]], [np.array(m, dtype=float) for m in d["maxs"]],
                   [{int(j): set(v) for j, v in voc.items()} for voc in d["vocab"]])

    def transform_modality(self, i: int, mod: Modality) -> Modality:
        values = np.array(mod.values, copy=True)
        for j, feat in enumerate(mod.schema):
            col = values[:, j]
            obs = mod.observed[:, j]
            if feat.is_categorical:
                seen = self.vocab[i][j]
                known = np.isin(col, list(seen))
                col[obs & ~known] = UNKNOWN
            else:
                lo, hi = self.mins[i][j], self.maxs[i][j]
                col[obs] = (col[obs] - lo) / (hi - lo)
        return mod.replace(values=values)


def fit_preprocessor(ds: MultimodalDataset, train_indices) -> Preprocessor:
    idx = np.asarray(train_indices, dtype=np.intp)
    if idx.size == 0:
        raise DatasetError("fit_preprocessor needs at least one training index")
    mins, maxs, vocab = [], [], []
    for m in ds.modalities:
        vals, obs = m.values[idx], m.observed[idx]
        lo = np.zeros(m.width)
        hi = np.ones(m.width)
        voc: dict[int, set[int]] = {}
        for j, feat in enumerate(m.schema):
            col = vals[obs[:, j], j]
            if feat.is_categorical:
                voc[j] = set(int(c) for c in col)
                continue
            if col.size == 0:
                log.warning("feature %s.%s has no observed training values; using identity scaling",
                            m.name, feat.name)
                continue
            lo[j], hi[j] = col.min(), col.max()
            if hi[j] == lo[j]:
                hi[j] = lo[j] + 1.0
        mins.append(lo)
        maxs.append(hi)
        vocab.append(voc)
    return Preprocessor(mins, maxs, vocab)


def apply_preprocessor(p: Preprocessor, ds: MultimodalDataset, indices=None) -> MultimodalDataset:
    if len(p.mins) != len(ds.modalities) or any(
            len(lo) != m.width for lo, m in zip(p.mins, ds.modalities)):
        raise DatasetError("preprocessor was fitted on a different schema")
    if indices is not None:
        ds = ds.subset(indices)
    return ds.with_modalities([p.transform_modality(i, m) for i, m in enumerate(ds.modalities)])


def one_hot(ds: MultimodalDataset) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Flatten to columns with categorical features expanded to one-hot.

    Returns (matrix, observed, spans) where ``spans[f]`` is the column range
    of global feature ``f``. Unknown categories encode as all-zero.
    """
    cols, obs_cols, spans = [], [], []
    start = 0
    for m in ds.modalities:
        for j, feat in enumerate(m.schema):
            v, o = m.values[:, j], m.observed[:, j]
            if feat.is_categorical:
                k = len(feat.categories)
                block = np.zeros((ds.n_samples, k))
                rows = np.nonzero(o & (v >= 0))[0]
                block[rows, v[rows].astype(int)] = 1.0
                cols.append(block)
                obs_cols.append(np.repeat(o[:, None], k, axis=1))
            else:
                k = 1
                cols.append(np.where(o, v, 0.0)[:, None])
                obs_cols.append(o[:, None])
            spans.append((start, start + k))
            start += k
    return np.concatenate(cols, axis=1), np.concatenate(obs_cols, axis=1), spans


# ---------------------------------------------------------------------- synthesis


def synthesize_dataset(seed: int, n_samples: int, modality_widths: Sequence[int],
                       class_count: int = 2, signal_spec: dict | None = None,
                       return_means: bool = False):
    """Gaussian class-conditional features spread over several modalities.

    ``signal_spec`` keys:
      ``shift``       scale of the class mean offsets (0 means no signal)
      ``categorical`` number of categorical features per modality (taken from
                      the end of each modality)
      ``n_categories`` categories per categorical feature
      ``informative`` per-modality multipliers on ``shift`` (cross-modal
                      distribution of the signal)

    Numerical feature ``j`` of class ``c`` is ``N(shift * a[c, j], 1)`` with
    ``a`` standard normal; categorical features draw from a class-tilted
    softmax over ``shift * b[c, :]``.

    With ``return_means`` the per-modality numerical class means are returned
    alongside the dataset.
    """
    spec = {"shift": 1.0, "categorical": 0, "n_categories": 3, "informative": None}
    spec.update(signal_spec or {})
    if n_samples < 50:
        raise DatasetError(f"n_samples must be at least 50, got {n_samples}")
    widths = list(modality_widths)
    if not widths or any(int(w) != w or w < 1 for w in widths):
        raise DatasetError(f"invalid modality widths {widths}")
    if class_count < 2:
        raise DatasetError("class_count must be at least 2")
    n_cat = int(spec["categorical"])
    if any(n_cat > w for w in widths):
        raise DatasetError("more categorical features than modality width")
    informative = spec["informative"] or [1.0] * len(widths)
    if len(informative) != len(widths):
        raise DatasetError("informative must have one entry per modality")

    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % class_count
    rng.shuffle(labels)
    k = int(spec["n_categories"])
    cats = tuple(f"c{i}" for i in range(k))
    modalities, all_means = [], []
    for i, w in enumerate(widths):
        shift = float(spec["shift"]) * float(informative[i])
        n_num = w - n_cat
        means = rng.standard_normal((class_count, n_num)) * shift
        all_means.append(means)
        vals = means[labels] + rng.standard_normal((n_samples, n_num))
        schema = [FeatureSchema(f"x{j}") for j in range(n_num)]
        cat_cols = []
        for j in range(n_cat):
            tilt = rng.standard_normal((class_count, k)) * shift
            probs = np.exp(tilt - tilt.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            u = rng.random(n_samples)
            cat_cols.append((u[:, None] > np.cumsum(probs[labels], axis=1)).sum(axis=1).clip(0, k - 1))
            schema.append(FeatureSchema(f"k{j}", CATEGORICAL, cats))
        grid = np.column_stack([vals] + [c.astype(float) for c in cat_cols]) if cat_cols else vals
        modalities.append(Modality(f"m{i}", tuple(schema), grid, np.ones_like(grid, dtype=bool)))
    ids = tuple(f"s{j:05d}" for j in range(n_samples))
    ds = MultimodalDataset(tuple(modalities), labels, tuple(f"class{c}" for c in range(class_count)), ids)
    return (ds, all_means) if return_means else ds


# ---------------------------------------------------------------------- splits


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    raw = weights / weights.sum() * total
    base = np.floor(raw).astype(int)
    order = np.argsort(-(raw - base), kind="stable")
    base[order[: total - base.sum()]] += 1
    return base


def stratified_splits(ds_or_labels, k: int = 5, val_fraction: float = 0.2,
                      seed: int = 0, strict: bool = True) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Stratified k-fold (train, val, test) index triples.

    Each class is shuffled and dealt round-robin over the folds, continuing
    where the previous class stopped so fold sizes differ by at most one.
    ``val_fraction`` of each fold's training part is split off, stratified.
    A class with fewer than ``k`` samples is an error; with ``strict=False``
    it only logs a warning and some test folds go without that class.
    """
    labels = np.asarray(ds_or_labels.labels if isinstance(ds_or_labels, MultimodalDataset)
                        else ds_or_labels)
    if k < 2:
        raise DatasetError("k must be at least 2")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    if (counts < k).any():
        bad = classes[counts < k]
        if strict:
            raise DatasetError(f"classes {bad.tolist()} have fewer than {k} samples")
        log.warning("classes %s have fewer than %d samples", bad.tolist(), k)
    fold_of = np.empty(labels.shape[0], dtype=int)
    offset = 0
    for c in classes:
        idx = np.nonzero(labels == c)[0]
        rng.shuffle(idx)
        fold_of[idx] = (offset + np.arange(idx.size)) % k
        offset = (offset + idx.size) % k
    out = []
    for f in range(k):
        test = np.nonzero(fold_of == f)[0]
        rest = np.nonzero(fold_of != f)[0]
        rest_labels = labels[rest]
        n_val = int(round(val_fraction * rest.size))
        per_class = _largest_remainder(n_val, np.array([(rest_labels == c).sum() for c in classes], float))
        val = []
        for c, nv in zip(classes, per_class):
            pool = rest[rest_labels == c].copy()
            rng.shuffle(pool)
            val.extend(pool[:nv])
        val = np.sort(np.array(val, dtype=int))
        train = np.setdiff1d(rest, val)
        out.append((train, val, test))
    return out


# ---------------------------------------------------------------------- file IO


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"empty CSV: {path}")
    return rows[0], rows[1:]


def load_dataset(manifest_path) -> MultimodalDataset:
    """Load a dataset described by a JSON manifest.

    Manifest keys: ``modalities`` (list of {name, path}), ``schema`` (path),
    ``labels`` (path), ``id_column``, ``label_column`` (default "label"),
    optional ``class_names`` and ``missing_tokens``.
    Relative paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"missing file: {manifest_path}")
    man = json.loads(manifest_path.read_text(encoding="utf-8"))
    root = manifest_path.parent
    id_col = man.get("id_column", "id")
    label_col = man.get("label_column", "label")
    missing_tokens = {""} | set(man.get("missing_tokens", []))
    schema_path = root / man["schema"]
    if not schema_path.exists():
        raise DatasetError(f"missing file: {schema_path}")
    schema_doc = json.loads(schema_path.read_text(encoding="utf-8"))

    header, rows = _read_csv(root / man["labels"])
    if id_col not in header or label_col not in header:
        raise DatasetError(f"labels file needs columns {id_col!r} and {label_col!r}")
    ic, lc = header.index(id_col), header.index(label_col)
    ids = [r[ic] for r in rows]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate sample ids in labels file")
    raw_labels = [r[lc] for r in rows]
    class_names = list(man.get("class_names") or sorted(set(raw_labels)))
    try:
        labels = np.array([class_names.index(v) for v in raw_labels])
    except ValueError as e:
        raise DatasetError(f"label not among class_names: {e}") from None
    position = {sid: i for i, sid in enumerate(ids)}

    modalities = []
    for entry in man["modalities"]:
        name = entry["name"]
        schema = tuple(FeatureSchema(f["name"], f.get("kind", NUMERICAL), tuple(f.get("categories", ())))
                       for f in schema_doc[name])
        header, rows = _read_csv(root / entry["path"])
        if header[0] != id_col:
            raise DatasetError(f"{entry['path']}: first column must be {id_col!r}")
        names = header[1:]
        if names != [f.name for f in schema]:
            raise DatasetError(f"{entry['path']}: header {names} does not match schema")
        if len(rows) != len(ids) or {r[0] for r in rows} != set(ids):
            raise DatasetError(f"modality {name!r}: sample ids do not match the labels file")
        values = np.zeros((len(ids), len(schema)))
        observed = np.zeros((len(ids), len(schema)), dtype=bool)
        for r in rows:
            i = position[r[0]]
            for j, (cell, feat) in enumerate(zip(r[1:], schema)):
                if cell in missing_tokens:
                    continue
                if feat.is_categorical:
                    if cell not in feat.categories:
                        raise DatasetError(f"modality {name!r}, feature {feat.name!r}: unknown category {cell!r}")
                    values[i, j] = feat.categories.index(cell)
                else:
                    try:
                        values[i, j] = float(cell)
                    except ValueError:
                        raise DatasetError(
                            f"modality {name!r}, feature {feat.name!r}: non-numeric value {cell!r}") from None
                    if not math.isfinite(values[i, j]):
                        raise DatasetError(f"modality {name!r}, feature {feat.name!r}: non-finite value {cell!r}")
                observed[i, j] = True
        modalities.append(Modality(name, schema, values, observed))
    return MultimodalDataset(tuple(modalities), labels, tuple(class_names), tuple(ids))


def _format_number(v: float) -> str:
    return repr(float(v))


def write_dataset(ds: MultimodalDataset, out_dir, id_column: str = "id") -> Path:
    """Write CSVs, schema and manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema_doc = {m.name: [f.to_dict() for f in m.schema] for m in ds.modalities}
    (out / "schema.json").write_text(json.dumps(schema_doc, indent=2) + "\n", encoding="utf-8")
    entries = []
    for m in ds.modalities:
        path = f"{m.name}.csv"
        with open(out / path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([id_column] + [f.name for f in m.schema])
            for sid, vals, obs in zip(ds.sample_ids, m.values, m.observed):
                row = [sid]
                for v, o, feat in zip(vals, obs, m.schema):
                    if not o:
                        row.append("")
                    elif feat.is_categorical:
                        row.append(feat.categories[int(v)])
                    else:
                        row.append(_format_number(v))
                w.writerow(row)
        entries.append({"name": m.name, "path": path})
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([id_column, "label"])
        for sid, y in zip(ds.sample_ids, ds.labels):
            w.writerow([sid, ds.class_names[y]])
    manifest = {"modalities": entries, "schema": "schema.json", "labels": "labels.csv",
                "id_column": id_column, "label_column": "label", "class_names": list(ds.class_names)}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path

"""Dataset ingestion and standardization: outlier cleaning, trimming, expansion,
normalization/tokenization, splitting, k-fold, and a synthetic-data generator.

The pipeline order is fixed: clean -> split -> fit stats on the training
fold only -> transform every fold with those stats.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DataError, RowError, SchemaError

logger = logging.getLogger(__name__)

UNK_TOKEN = "<UNK>"
UNK_ID = 0

KNOWN_GROUPS = ("Char", "CPU", "Memory", "Other")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str                    # "numeric" | "categorical"
    group: str                   # Char | CPU | Memory | Other
    drop: bool = False
    expand_via: str | None = None


@dataclass(frozen=True)
class FeatureSchema:
    suite: str
    features: tuple[FeatureSpec, ...]
    outputs: tuple[str, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        for f in self.features:
            if f.kind not in ("numeric", "categorical"):
                raise SchemaError(f"feature {f.name!r} has unknown kind {f.kind!r}")
            if f.group not in KNOWN_GROUPS:
                raise SchemaError(f"feature {f.name!r} has unknown group {f.group!r}")
        if not self.outputs:
            raise SchemaError("schema declares no output columns")

    def active(self) -> "FeatureSchema":
        """The schema with drop-flagged features removed."""
        return replace(self, features=tuple(f for f in self.features if not f.drop))

    def numeric_names(self) -> list[str]:
        return [f.name for f in self.features if f.kind == "numeric"]

    def categorical_names(self) -> list[str]:
        return [f.name for f in self.features if f.kind == "categorical"]

    def group_of(self) -> list[str]:
        return [f.group for f in self.features]

    def to_json(self) -> dict:
        return {
            "suite": self.suite,
            "features": [
                {
                    "name": f.name,
                    "kind": f.kind,
                    "group": f.group,
                    "drop": f.drop,
                    "expand_via": f.expand_via,
                }
                for f in self.features
            ],
            "outputs": list(self.outputs),
        }

    @staticmethod
    def from_json(doc: dict) -> "FeatureSchema":
        return FeatureSchema(
            suite=doc["suite"],
            features=tuple(
                FeatureSpec(
                    name=f["name"],
                    kind=f["kind"],
                    group=f["group"],
                    drop=bool(f.get("drop", False)),
                    expand_via=f.get("expand_via"),
                )
                for f in doc["features"]
            ),
            outputs=tuple(doc["outputs"]),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_schema(path) -> FeatureSchema:
    with open(path, encoding="utf-8") as fh:
        return FeatureSchema.from_json(json.load(fh))


@dataclass
class Dataset:
    """Column-major sample store. Column order follows schema feature order
    within each kind; `cat_ids` is filled by tokenization."""

    schema: FeatureSchema
    numeric: np.ndarray                 # (n, F_num) float64
    categorical: np.ndarray             # (n, F_cat) object (token strings)
    outputs: np.ndarray                 # (n, n_out) float64
    provenance: list[tuple[str, int]]
    cat_ids: np.ndarray | None = None   # (n, F_cat) int
    standardized: bool = False

    @property
    def n(self) -> int:
        return self.outputs.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            schema=self.schema,
            numeric=self.numeric[idx],
            categorical=self.categorical[idx],
            outputs=self.outputs[idx],
            provenance=[self.provenance[i] for i in idx],
            cat_ids=None if self.cat_ids is None else self.cat_ids[idx],
            standardized=self.standardized,
        )


# ---------------------------------------------------------------------------
# CSV ingestion: trimming and expansion happen here

def load_mapping(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _expansion_table(mapping: dict, key: str, feature: str) -> dict:
    """Resolve the lookup table for one expand_via feature.

    The mapping file is either namespaced ({key: {value: {col: num}}}) or a
    single flat table ({value: {col: num}}) that applies to every expanded
    feature.
    """
    if mapping is None:
        raise SchemaError(f"feature {feature!r} declares expand_via={key!r} but no mapping file was given")
    table = mapping.get(key, mapping)
    if not isinstance(table, dict) or not all(isinstance(v, dict) for v in table.values()):
        raise SchemaError(f"mapping for {key!r} must be {{value: {{column: number}}}}")
    col_sets = {tuple(sorted(v)) for v in table.values()}
    if len(col_sets) != 1:
        raise SchemaError(f"mapping for {key!r} has inconsistent column sets across values")
    return table


def load_csv(path, schema: FeatureSchema, mapping: dict | None = None) -> Dataset:
    """Read a CSV against the schema: typed columns, drops applied, expansions resolved.

    The header must contain every non-dropped schema feature and every
    output column (order-insensitive, extra columns ignored).
    """
    active = schema.active()
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = rows[0]
    col_of = {name: i for i, name in enumerate(header)}
    for f in active.features:
        if f.name not in col_of:
            raise SchemaError(f"{path}: missing feature column {f.name!r}")
    for name in active.outputs:
        if name not in col_of:
            raise SchemaError(f"{path}: missing output column {name!r}")

    # derive the post-expansion feature list
    derived: list[FeatureSpec] = []
    tables: dict[str, dict] = {}
    for f in active.features:
        if f.expand_via is None:
            derived.append(replace(f, drop=False, expand_via=None))
        else:
            table = _expansion_table(mapping, f.expand_via, f.name)
            tables[f.name] = table
            cols = sorted(next(iter(table.values())))
            derived.extend(
                FeatureSpec(name=f"{f.name}.{c}", kind="numeric", group=f.group) for c in cols
            )
    derived_schema = FeatureSchema(suite=schema.suite, features=tuple(derived), outputs=active.outputs)

    numeric_rows: list[list[float]] = []
    cat_rows: list[list[str]] = []
    out_rows: list[list[float]] = []
    provenance: list[tuple[str, int]] = []
    for r, row in enumerate(rows[1:]):
        num: list[float] = []
        cat: list[str] = []
        for f in active.features:
            cell = row[col_of[f.name]]
            if f.expand_via is not None:
                table = tables[f.name]
                if cell not in table:
                    raise RowError(f"{path}: row {r}: value {cell!r} not in mapping for {f.name!r}")
                num.extend(float(table[cell][c]) for c in sorted(table[cell]))
            elif f.kind == "numeric":
                try:
                    num.append(float(cell))
                except ValueError:
                    raise RowError(f"{path}: row {r}: cannot parse {cell!r} as numeric {f.name!r}") from None
            else:
                cat.append(cell)
        try:
            out_rows.append([float(row[col_of[name]]) for name in active.outputs])
        except ValueError:
            raise RowError(f"{path}: row {r}: cannot parse output value") from None
        numeric_rows.append(num)
        cat_rows.append(cat)
        provenance.append((str(path), r))

    n_num = len(derived_schema.numeric_names())
    n_cat = len(derived_schema.categorical_names())
    return Dataset(
        schema=derived_schema,
        numeric=np.asarray(numeric_rows, dtype=np.float64).reshape(len(numeric_rows), n_num),
        categorical=np.asarray(cat_rows, dtype=object).reshape(len(cat_rows), n_cat),
        outputs=np.asarray(out_rows, dtype=np.float64),
        provenance=provenance,
    )


def write_csv(d: Dataset, path) -> None:
    """Write raw (unstandardized) samples back out with a schema-ordered header."""
    num_names = d.schema.numeric_names()
    cat_names = d.schema.categorical_names()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f.name for f in d.schema.features] + list(d.schema.outputs))
        ni = {name: j for j, name in enumerate(num_names)}
        ci = {name: j for j, name in enumerate(cat_names)}
        for i in range(d.n):
            row = []
            for f in d.schema.features:
                if f.kind == "numeric":
                    row.append(repr(float(d.numeric[i, ni[f.name]])))
                else:
                    row.append(str(d.categorical[i, ci[f.name]]))
            row.extend(repr(float(v)) for v in d.outputs[i])
            w.writerow(row)


# ---------------------------------------------------------------------------
# outlier cleaning (single pass, output columns)

def clean_outliers(d: Dataset, threshold: float = 3.0) -> tuple[Dataset, list[int]]:
    """Drop rows whose z-score exceeds the threshold on any output column.

    Stats are computed once over the input dataset (one pass). Columns with
    zero variance are skipped. Returns the surviving dataset and the list of
    removed row indices (into `d`).
    """
    keep = np.ones(d.n, dtype=bool)
    for j in range(d.outputs.shape[1]):
        col = d.outputs[:, j]
        mu = col.mean()
        sigma = col.std()
        if sigma == 0.0:
            logger.warning("output column %d has zero variance; outlier pass skipped", j)
            continue
        keep &= np.abs((col - mu) / sigma) <= threshold
    removed = [int(i) for i in np.nonzero(~keep)[0]]
    return d.subset(np.nonzero(keep)[0]), removed


# ---------------------------------------------------------------------------
# normalization and tokenization

@dataclass
class NormStats:
    """Per-feature and per-output mean/std fit on the training fold only."""

    feature_mean: dict[str, float]
    feature_std: dict[str, float]
    output_mean: np.ndarray
    output_std: np.ndarray
    trimmed: list[str] = field(default_factory=list)  # zero-variance features removed at fit

    def to_json(self) -> dict:
        return {
            "feature_mean": self.feature_mean,
            "feature_std": self.feature_std,
            "output_mean": list(map(float, self.output_mean)),
            "output_std": list(map(float, self.output_std)),
            "trimmed": self.trimmed,
        }

    @staticmethod
    def from_json(doc: dict) -> "NormStats":
        return NormStats(
            feature_mean=dict(doc["feature_mean"]),
            feature_std=dict(doc["feature_std"]),
            output_mean=np.asarray(doc["output_mean"], dtype=np.float64),
            output_std=np.asarray(doc["output_std"], dtype=np.float64),
            trimmed=list(doc["trimmed"]),
        )


@dataclass
class Vocabulary:
    """Token -> id per categorical feature; id 0 is reserved for unknowns."""

    tokens: dict[str, dict[str, int]]

    def size_of(self, feature: str) -> int:
        return len(self.tokens[feature]) + 1  # + UNK

    def id_of(self, feature: str, token: str) -> int:
        return self.tokens[feature].get(token, UNK_ID)

    def to_json(self) -> dict:
        return {"unk_token": UNK_TOKEN, "unk_id": UNK_ID, "tokens": self.tokens}

    @staticmethod
    def from_json(doc: dict) -> "Vocabulary":
        return Vocabulary(tokens={k: dict(v) for k, v in doc["tokens"].items()})


def fit_transform(train: Dataset) -> tuple[NormStats, Vocabulary, Dataset]:
    """Fit stats/vocabulary on the training fold and standardize it.

    Numeric features with zero variance carry no signal and break the
    z-score, so they are trimmed here and recorded in `stats.trimmed`.
    """
    num_names = train.schema.numeric_names()
    mean: dict[str, float] = {}
    std: dict[str, float] = {}
    trimmed: list[str] = []
    for j, name in enumerate(num_names):
        col = train.numeric[:, j]
        s = col.std()
        if s == 0.0:
            trimmed.append(name)
            logger.warning("numeric feature %r has zero variance on the training fold; trimmed", name)
            continue
        mean[name] = float(col.mean())
        std[name] = float(s)

    out_mean = train.outputs.mean(axis=0)
    out_std = train.outputs.std(axis=0)
    out_std = np.where(out_std == 0.0, 1.0, out_std)

    vocab_tokens: dict[str, dict[str, int]] = {}
    for j, name in enumerate(train.schema.categorical_names()):
        seen = sorted(set(str(t) for t in train.categorical[:, j]))
        vocab_tokens[name] = {t: i + 1 for i, t in enumerate(seen)}
    vocab = Vocabulary(tokens=vocab_tokens)

    stats = NormStats(
        feature_mean=mean,
        feature_std=std,
        output_mean=out_mean,
        output_std=out_std,
        trimmed=trimmed,
    )
    return stats, vocab, apply_transform(stats, vocab, train)


def apply_transform(stats: NormStats, vocab: Vocabulary, d: Dataset) -> Dataset:
    """Standardize numeric features and outputs, tokenize categoricals.

    Unseen tokens map to the unknown id. Trimmed features are removed so the
    transformed schema is identical for every fold.
    """
    num_names = d.schema.numeric_names()
    kept = [j for j, name in enumerate(num_names) if name not in stats.trimmed]
    kept_names = {num_names[j] for j in kept}
    numeric = np.empty((d.n, len(kept)), dtype=np.float64)
    for out_j, j in enumerate(kept):
        name = num_names[j]
        numeric[:, out_j] = (d.numeric[:, j] - stats.feature_mean[name]) / stats.feature_std[name]

    cat_names = d.schema.categorical_names()
    cat_ids = np.zeros((d.n, len(cat_names)), dtype=np.intp)
    for j, name in enumerate(cat_names):
        cat_ids[:, j] = [vocab.id_of(name, str(t)) for t in d.categorical[:, j]]

    outputs = (d.outputs - stats.output_mean) / stats.output_std
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(outputs))):
        raise DataError("non-finite values after standardization")

    schema = replace(
        d.schema,
        features=tuple(f for f in d.schema.features if f.kind == "categorical" or f.name in kept_names),
    )
    return Dataset(
        schema=schema,
        numeric=numeric,
        categorical=d.categorical,
        outputs=outputs,
        provenance=list(d.provenance),
        cat_ids=cat_ids,
        standardized=True,
    )


def destandardize_outputs(stats: NormStats, y: np.ndarray) -> np.ndarray:
    return y * stats.output_std + stats.output_mean


# ---------------------------------------------------------------------------
# splitting

def split(d: Dataset, seed: int, val_frac: float = 0.2, test_frac: float = 0.2) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic train/val/test split.

    The test share is carved first (floor of test_frac * n), then the val
    share as floor of val_frac of the remainder, and the rest trains; that
    sequential carve is what reproduces 1274 -> 816/204/254.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(d.n)
    n_test = math.floor(test_frac * d.n)
    n_val = math.floor(val_frac * (d.n - n_test))
    test = d.subset(perm[:n_test])
    val = d.subset(perm[n_test : n_test + n_val])
    train = d.subset(perm[n_test + n_val :])
    return train, val, test


def kfold(d: Dataset, k: int = 5, seed: int = 0) -> list[tuple[Dataset, Dataset]]:
    """k deterministic (train, validation) pairs; every sample validates exactly once."""
    if d.n < k:
        raise ContractError(f"dataset of {d.n} samples cannot be split into {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(d.n)
    sizes = [d.n // k + (1 if i < d.n % k else 0) for i in range(k)]
    folds = []
    start = 0
    for s in sizes:
        val_idx = perm[start : start + s]
        train_idx = np.concatenate([perm[:start], perm[start + s :]])
        folds.append((d.subset(train_idx), d.subset(val_idx)))
        start += s
    return folds


# ---------------------------------------------------------------------------
# synthetic suite

@dataclass(frozen=True)
class SynthSpec:
    """Controls the synthetic benchmark generator.

    Targets are base + group-scaled linear terms + optional pairwise
    interaction terms + per-token categorical offsets + Gaussian noise.
    `group_signal` rescales the linear terms per group (0 silences a group).
    """

    n_samples: int = 500
    numeric_counts: tuple[tuple[str, int], ...] = (("CPU", 20), ("Memory", 6), ("Other", 5))
    n_char_categorical: int = 4
    vocab_size: int = 5
    n_outputs: int = 1
    noise_sigma: float = 0.5
    interactions: bool = True
    n_interaction_pairs: int = 4
    base: float = 100.0
    linear_scale: float = 3.0
    interaction_scale: float = 4.0
    offset_scale: float = 2.0
    group_signal: tuple[tuple[str, float], ...] = ()
    suite: str = "synthetic"

    @staticmethod
    def linear(n_samples: int = 500, noise_sigma: float = 0.1) -> "SynthSpec":
        """Purely linear numeric data; a linear model can fit it almost exactly."""
        return SynthSpec(
            n_samples=n_samples,
            n_char_categorical=0,
            noise_sigma=noise_sigma,
            interactions=False,
            suite="synthetic_linear",
        )


@dataclass
class SyntheticTruth:
    """The recorded generating function of a synthetic dataset."""

    spec: SynthSpec
    linear_w: np.ndarray        # (F_num, n_out)
    pairs: list[tuple[int, int]]
    pair_w: np.ndarray          # (n_pairs, n_out)
    offsets: dict[str, np.ndarray]  # feature -> (vocab, n_out)

    def evaluate(self, numeric: np.ndarray, categorical: np.ndarray) -> np.ndarray:
        """Noise-free targets for raw (unstandardized) feature rows."""
        y = np.full((numeric.shape[0], self.spec.n_outputs), self.spec.base)
        y += numeric @ self.linear_w
        for p, (i, j) in enumerate(self.pairs):
            y += np.outer(numeric[:, i] * numeric[:, j], self.pair_w[p])
        for j, name in enumerate(self.offsets):
            tok_idx = np.array([int(t.rsplit("_", 1)[1]) for t in categorical[:, j]])
            y += self.offsets[name][tok_idx]
        return y

    def to_json(self) -> dict:
        return {
            "base": self.spec.base,
            "linear_w": self.linear_w.tolist(),
            "pairs": [list(p) for p in self.pairs],
            "pair_w": self.pair_w.tolist(),
            "offsets": {k: v.tolist() for k, v in self.offsets.items()},
            "noise_sigma": self.spec.noise_sigma,
        }


def synth_schema(spec: SynthSpec) -> FeatureSchema:
    feats: list[FeatureSpec] = []
    for i in range(spec.n_char_categorical):
        feats.append(FeatureSpec(name=f"char_{i}", kind="categorical", group="Char"))
    for group, count in spec.numeric_counts:
        tag = group.lower()[:3]
        for i in range(count):
            feats.append(FeatureSpec(name=f"{tag}_{i:02d}", kind="numeric", group=group))
    outputs = tuple(f"score_{i}" for i in range(spec.n_outputs)) if spec.n_outputs > 1 else ("score",)
    return FeatureSchema(suite=spec.suite, features=tuple(feats), outputs=outputs)


def synthesize(spec: SynthSpec, seed: int) -> tuple[Dataset, SyntheticTruth]:
    """Generate a raw dataset plus its recorded generating function."""
    rng = np.random.default_rng(seed)
    schema = synth_schema(spec)
    n_num = len(schema.numeric_names())

    numeric = rng.uniform(-1.0, 1.0, size=(spec.n_samples, n_num))
    categorical = np.empty((spec.n_samples, spec.n_char_categorical), dtype=object)
    for j in range(spec.n_char_categorical):
        ids = rng.integers(0, spec.vocab_size, size=spec.n_samples)
        categorical[:, j] = [f"tok{j}_{i}" for i in ids]

    signal = dict(spec.group_signal)
    scale = np.array(
        [spec.linear_scale * signal.get(g, 1.0) for g in (f.group for f in schema.features if f.kind == "numeric")]
    )
    linear_w = rng.uniform(-1.0, 1.0, size=(n_num, spec.n_outputs)) * scale[:, None]

    pairs: list[tuple[int, int]] = []
    pair_w = np.zeros((0, spec.n_outputs))
    if spec.interactions and n_num >= 2:
        chosen = set()
        while len(chosen) < spec.n_interaction_pairs:
            i, j = sorted(rng.integers(0, n_num, size=2))
            if i != j:
                chosen.add((int(i), int(j)))
        pairs = sorted(chosen)
        pair_w = rng.uniform(-1.0, 1.0, size=(len(pairs), spec.n_outputs)) * spec.interaction_scale

    offsets = {
        f"char_{j}": rng.uniform(-spec.offset_scale, spec.offset_scale, size=(spec.vocab_size, spec.n_outputs))
        for j in range(spec.n_char_categorical)
    }

    truth = SyntheticTruth(spec=spec, linear_w=linear_w, pairs=pairs, pair_w=pair_w, offsets=offsets)
    y = truth.evaluate(numeric, categorical)
    if spec.noise_sigma > 0:
        y = y + rng.normal(0.0, spec.noise_sigma, size=y.shape)

    ds = Dataset(
        schema=schema,
        numeric=numeric,
        categorical=categorical,
        outputs=y,
        provenance=[("synthetic", i) for i in range(spec.n_samples)],
    )
    return ds, truth


# ---------------------------------------------------------------------------
# one-call pipeline and dataset (de)serialization

@dataclass
class PreparedData:
    train: Dataset
    val: Dataset
    test: Dataset
    stats: NormStats
    vocab: Vocabulary
    removed: list[int]


def prepare(d: Dataset, seed: int, z_threshold: float = 3.0) -> PreparedData:
    """clean -> split -> fit on train -> transform all three folds."""
    cleaned, removed = clean_outliers(d, threshold=z_threshold)
    train, val, test = split(cleaned, seed=seed)
    stats, vocab, train_t = fit_transform(train)
    return PreparedData(
        train=train_t,
        val=apply_transform(stats, vocab, val),
        test=apply_transform(stats, vocab, test),
        stats=stats,
        vocab=vocab,
        removed=removed,
    )


def dataset_to_json(d: Dataset) -> dict:
    return {
        "schema": d.schema.to_json(),
        "numeric": d.numeric.tolist(),
        "categorical": [[str(t) for t in row] for row in d.categorical],
        "cat_ids": None if d.cat_ids is None else d.cat_ids.tolist(),
        "outputs": d.outputs.tolist(),
        "provenance": [[src, int(i)] for src, i in d.provenance],
        "standardized": d.standardized,
    }


def dataset_from_json(doc: dict) -> Dataset:
    schema = FeatureSchema.from_json(doc["schema"])
    n = len(doc["outputs"])
    return Dataset(
        schema=schema,
        numeric=np.asarray(doc["numeric"], dtype=np.float64).reshape(n, len(schema.numeric_names())),
        categorical=np.asarray(doc["categorical"], dtype=object).reshape(n, len(schema.categorical_names())),
        outputs=np.asarray(doc["outputs"], dtype=np.float64),
        provenance=[(src, i) for src, i in doc["provenance"]],
        cat_ids=None if doc["cat_ids"] is None else np.asarray(doc["cat_ids"], dtype=np.intp),
        standardized=bool(doc["standardized"]),
    )

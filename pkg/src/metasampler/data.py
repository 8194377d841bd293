"""Synthetic identity-clustered datasets and their file format.

Samples are feature vectors drawn around per-identity centers; each sample
carries a view-like mode tag in {0, 1, 2} produced by adding a fixed
per-(identity, mode) offset direction, so cross-mode retrieval is genuinely
harder.  Controllable knobs: identity-count imbalance (uniform or power-law),
a hard fraction drawn at 3x the noise scale, few-shot down-sampling of the
largest identities, and label switching on the train split.

File format (line oriented, exact decimal round trip):

    dims=<d> identities=<k>
    id,label,true_label,mode,split,v1,...,vd
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPLIT_TRAIN = "train"
SPLIT_QUERY = "query"
SPLIT_GALLERY = "gallery"
SPLITS = (SPLIT_TRAIN, SPLIT_QUERY, SPLIT_GALLERY)
NUM_MODES = 3


class DatasetFormatError(Exception):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64, identity per sample
    true_labels: np.ndarray  # (N,) int64, pre-noise identity
    modes: np.ndarray  # (N,) int64 in {0..NUM_MODES-1}
    split: np.ndarray  # (N,) str in SPLITS
    num_identities: int
    hard: np.ndarray | None = None  # in-memory tag only, never serialized

    def __post_init__(self):
        n = len(self.features)
        for name in ("labels", "true_labels", "modes", "split"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"Dataset: {name} length != {n}")
        if self.hard is not None and len(self.hard) != n:
            raise ValueError("Dataset: hard length mismatch")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def rows_of(self, split_tag: str) -> np.ndarray:
        return np.flatnonzero(self.split == split_tag)

    @property
    def train_ids(self) -> np.ndarray:
        return self.rows_of(SPLIT_TRAIN)

    @property
    def query_ids(self) -> np.ndarray:
        return self.rows_of(SPLIT_QUERY)

    @property
    def gallery_ids(self) -> np.ndarray:
        return self.rows_of(SPLIT_GALLERY)

    def subset(self, keep: np.ndarray) -> "Dataset":
        return Dataset(
            features=self.features[keep].copy(),
            labels=self.labels[keep].copy(),
            true_labels=self.true_labels[keep].copy(),
            modes=self.modes[keep].copy(),
            split=self.split[keep].copy(),
            num_identities=self.num_identities,
            hard=None if self.hard is None else self.hard[keep].copy(),
        )

    def copy(self) -> "Dataset":
        return self.subset(np.arange(len(self)))


@dataclass(frozen=True)
class SynthSpec:
    """Geometry of a generated dataset.

    ``hard_fraction`` of samples are drawn with 3x the noise scale and tagged
    in :attr:`Dataset.hard`.  Long-tail identity sizes follow a power law with
    the given exponent, floored at 2 samples per identity.
    """

    num_identities: int = 50
    samples_per_identity: int = 20
    distribution: str = "uniform"  # "uniform" | "longtail"
    zipf_exponent: float = 1.2
    input_dim: int = 16
    center_spread: float = 1.0
    mode_offset: float = 0.5
    noise_std: float = 0.35
    hard_fraction: float = 0.0
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if self.num_identities < 1 or self.samples_per_identity < 1:
            raise ValueError("SynthSpec: sizes must be >= 1")
        if self.distribution not in ("uniform", "longtail"):
            raise ValueError(f"SynthSpec: unknown distribution {self.distribution!r}")
        if self.center_spread <= 0 or self.noise_std <= 0:
            raise ValueError("SynthSpec: spread and noise std must be > 0")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ValueError("SynthSpec: hard_fraction must be in [0, 1]")


def _identity_counts(spec: SynthSpec) -> np.ndarray:
    if spec.distribution == "uniform":
        counts = np.full(spec.num_identities, spec.samples_per_identity, dtype=np.int64)
    else:
        ranks = np.arange(1, spec.num_identities + 1, dtype=np.float64)
        counts = np.maximum(
            2, np.round(spec.samples_per_identity * ranks ** (-spec.zipf_exponent))
        ).astype(np.int64)
    if (counts < 1).any():
        raise ValueError("identity with 0 samples requested")
    return counts


def generate_synthetic(spec: SynthSpec, seed: int) -> Dataset:
    """Deterministic synthetic dataset for the given spec and seed.

    Per identity, roughly ``holdout_fraction`` of samples are held out; among
    the held-out samples, one per distinct mode becomes gallery (so the
    gallery covers every mode it can) and the rest become queries.
    """
    rng = np.random.default_rng(seed)
    counts = _identity_counts(spec)
    k, d = spec.num_identities, spec.input_dim
    centers = rng.normal(0.0, spec.center_spread, (k, d))
    dirs = rng.normal(size=(k, NUM_MODES, d))
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    offsets = dirs * spec.mode_offset

    feats, labels, modes, split, hard = [], [], [], [], []
    for ident in range(k):
        count = int(counts[ident])
        sample_modes = np.arange(count) % NUM_MODES
        is_hard = rng.random(count) < spec.hard_fraction
        scale = spec.noise_std * np.where(is_hard, 3.0, 1.0)
        noise = rng.normal(size=(count, d)) * scale[:, None]
        feats.append(centers[ident] + offsets[ident, sample_modes] + noise)
        labels.append(np.full(count, ident, dtype=np.int64))
        modes.append(sample_modes)
        hard.append(is_hard)

        tags = np.array([SPLIT_TRAIN] * count, dtype="<U8")
        n_test = min(count - 1, max(2, int(round(spec.holdout_fraction * count))))
        if n_test == 1:
            tags[int(rng.permutation(count)[0])] = SPLIT_GALLERY
        elif n_test > 1:
            perm = rng.permutation(count)
            test = perm[:n_test]
            tags[test[0]] = SPLIT_QUERY  # every identity keeps at least one query
            seen_modes: set[int] = set()
            for row in test[1:]:
                mode = int(sample_modes[row])
                if mode not in seen_modes:
                    tags[row] = SPLIT_GALLERY
                    seen_modes.add(mode)
                else:
                    tags[row] = SPLIT_QUERY
        split.append(tags)

    labels = np.concatenate(labels)
    return Dataset(
        features=np.concatenate(feats),
        labels=labels,
        true_labels=labels.copy(),
        modes=np.concatenate(modes).astype(np.int64),
        split=np.concatenate(split),
        num_identities=k,
        hard=np.concatenate(hard),
    )


def apply_imbalance(dataset: Dataset, m: int, n: int) -> Dataset:
    """Down-sample the ``m`` identities with the most train samples to ``n`` each.

    Kept samples are the lowest sample ids.  Identities already at or below
    ``n`` train samples are left unchanged, as are the query/gallery splits.
    """
    if n < 1:
        raise ValueError("apply_imbalance: n must be >= 1")
    if m < 0 or m > dataset.num_identities:
        raise ValueError(f"apply_imbalance: m={m} out of range")
    train_mask = dataset.split == SPLIT_TRAIN
    counts = np.bincount(
        dataset.labels[train_mask], minlength=dataset.num_identities
    )
    # most-populous first; ties resolved by identity id ascending
    order = np.lexsort((np.arange(dataset.num_identities), -counts))
    keep = np.ones(len(dataset), dtype=bool)
    for ident in order[:m]:
        rows = np.flatnonzero(train_mask & (dataset.labels == ident))
        if rows.size > n:
            keep[rows[n:]] = False  # rows are ascending ids; keep the lowest n
    return dataset.subset(np.flatnonzero(keep))


def few_shot_count(num_identities: int, fraction: float) -> int:
    """Number of identities affected by an imbalance fraction (e.g. 0.9)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("imbalance fraction must be in [0, 1]")
    return int(np.ceil(fraction * num_identities))


def inject_label_noise(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Switch labels of exactly round(fraction * n_train) train samples.

    Each switched label becomes a uniformly random *different* identity;
    true_labels and the query/gallery splits are untouched.
    """
    if not 0.0 <= fraction <= 0.5:
        raise ValueError("inject_label_noise: fraction must be in [0, 0.5]")
    out = dataset.copy()
    train_rows = out.train_ids
    count = int(round(fraction * train_rows.size))
    if count == 0:
        return out
    rng = np.random.default_rng(seed)
    chosen = rng.choice(train_rows, size=count, replace=False)
    for row in chosen:
        shift = int(rng.integers(1, out.num_identities))
        out.labels[row] = (out.labels[row] + shift) % out.num_identities
    return out


@dataclass
class CrossViewGroup:
    mode: int
    query_rows: np.ndarray
    gallery_rows: np.ndarray  # gallery restricted to other modes


@dataclass
class CrossViewSplit:
    groups: list[CrossViewGroup]
    dropped_queries: int = 0


def cross_view_eval_split(dataset: Dataset) -> CrossViewSplit:
    """Per query mode, restrict the gallery to samples of *different* modes.

    Queries whose identity has no cross-mode gallery sample cannot be
    evaluated; they are dropped and counted.
    """
    gallery_rows = dataset.gallery_ids
    groups = []
    dropped = 0
    for mode in range(NUM_MODES):
        eligible = gallery_rows[dataset.modes[gallery_rows] != mode]
        eligible_idents = set(dataset.labels[eligible].tolist())
        q_rows = dataset.query_ids
        q_rows = q_rows[dataset.modes[q_rows] == mode]
        valid = np.array(
            [int(dataset.labels[r]) in eligible_idents for r in q_rows], dtype=bool
        )
        dropped += int((~valid).sum())
        groups.append(
            CrossViewGroup(mode=mode, query_rows=q_rows[valid], gallery_rows=eligible)
        )
    return CrossViewSplit(groups=groups, dropped_queries=dropped)


def save_dataset(dataset: Dataset, path) -> None:
    lines = [f"dims={dataset.input_dim} identities={dataset.num_identities}"]
    for i in range(len(dataset)):
        values = ",".join(repr(float(v)) for v in dataset.features[i])
        lines.append(
            f"{i},{int(dataset.labels[i])},{int(dataset.true_labels[i])},"
            f"{int(dataset.modes[i])},{dataset.split[i]},{values}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    header = lines[0].split()
    try:
        assert len(header) == 2
        dims = int(header[0].removeprefix("dims="))
        identities = int(header[1].removeprefix("identities="))
        assert header[0].startswith("dims=") and header[1].startswith("identities=")
    except (AssertionError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: line 1: bad header {lines[0]!r}") from exc
    feats, labels, trues, modes, split = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 5 + dims:
            raise DatasetFormatError(
                f"{path}: line {lineno}: expected {5 + dims} fields, got {len(fields)}"
            )
        try:
            row_id = int(fields[0])
            label, true_label, mode = int(fields[1]), int(fields[2]), int(fields[3])
            tag = fields[4]
            values = np.array([float(v) for v in fields[5:]])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
        if row_id != len(feats):
            raise DatasetFormatError(
                f"{path}: line {lineno}: id {row_id}, expected {len(feats)}"
            )
        if not 0 <= label < identities or not 0 <= true_label < identities:
            raise DatasetFormatError(f"{path}: line {lineno}: label out of range")
        if not 0 <= mode < NUM_MODES:
            raise DatasetFormatError(f"{path}: line {lineno}: mode {mode} out of range")
        if tag not in SPLITS:
            raise DatasetFormatError(f"{path}: line {lineno}: unknown split {tag!r}")
        feats.append(values)
        labels.append(label)
        trues.append(true_label)
        modes.append(mode)
        split.append(tag)
    if not feats:
        raise DatasetFormatError(f"{path}: no records")
    return Dataset(
        features=np.stack(feats),
        labels=np.array(labels, dtype=np.int64),
        true_labels=np.array(trues, dtype=np.int64),
        modes=np.array(modes, dtype=np.int64),
        split=np.array(split, dtype="<U8"),
        num_identities=identities,
    )

"""Synthetic two-domain data, feature CSV files and PK batch sampling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .losses import DegenerateBatchError

SOURCE = "source"
TARGET = "target"
NA = "NA"


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    pass


class LabeledSample(NamedTuple):
    input: np.ndarray
    label: int | None
    camera_id: int
    domain: str
    instance_id: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented samples of one domain.

    ``labels`` is None for target training data; the ground truth for those
    samples lives outside the dataset and never reaches the trainer.
    """

    inputs: np.ndarray
    cameras: np.ndarray
    instance_ids: np.ndarray
    domain: str = SOURCE
    labels: np.ndarray | None = None

    def __post_init__(self):
        n = self.inputs.shape[0]
        if self.inputs.ndim != 2:
            raise SchemaError("inputs must be a 2-D array")
        if self.cameras.shape != (n,) or self.instance_ids.shape != (n,):
            raise SchemaError("cameras and instance ids need one entry per sample")
        if self.labels is not None and self.labels.shape != (n,):
            raise SchemaError("labels need one entry per sample")
        if len(np.unique(self.instance_ids)) != n:
            raise SchemaError("instance ids must be unique")
        if self.domain == SOURCE and self.labels is None:
            raise SchemaError("source samples must carry labels")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            label = None if self.labels is None else int(self.labels[i])
            yield LabeledSample(self.inputs[i], label, int(self.cameras[i]), self.domain,
                                int(self.instance_ids[i]))

    def unlabeled(self) -> "Dataset":
        return Dataset(self.inputs, self.cameras, self.instance_ids, self.domain, None)

    def equals(self, other: "Dataset") -> bool:
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (same_labels and self.domain == other.domain
                and np.array_equal(self.inputs, other.inputs)
                and np.array_equal(self.cameras, other.cameras)
                and np.array_equal(self.instance_ids, other.instance_ids))


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 50
    test_samples_per_class: int = 20
    input_dim: int = 16
    sigma_between: float = 1.0
    sigma_within: float = 0.3
    rotation_deg: float = 30.0
    translation_norm: float = 1.0
    scale_range: tuple[float, float] = (0.8, 1.25)
    cameras_per_domain: int = 4
    signal_dim: int | None = 4
    nuisance_sigma: float = 0.5
    camera_sigma: float = 0.0
    share_centers: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.samples_per_class < 1 or self.test_samples_per_class < 0:
            raise ValueError("class and sample counts must be positive")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2 (the rotation acts on the first two dims)")
        if not self.sigma_between > self.sigma_within >= 0:
            raise ValueError("need sigma_between > sigma_within >= 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale range must be positive and ordered")
        if self.cameras_per_domain < 1:
            raise ValueError("need at least one camera")
        if self.signal_dim is not None and not 1 <= self.signal_dim <= self.input_dim:
            raise ValueError("signal_dim must lie in [1, input_dim]")
        if self.nuisance_sigma < 0 or self.camera_sigma < 0:
            raise ValueError("nuisance and camera spreads must be non-negative")


@dataclass(frozen=True, eq=False)
class SyntheticData:
    source: Dataset
    target: Dataset            # unlabeled training split
    target_labels: np.ndarray  # hidden ground truth for ``target``
    test: Dataset              # labeled held-out target split for retrieval metrics

    def __iter__(self):
        return iter((self.source, self.target, self.target_labels))


@dataclass(frozen=True)
class DomainShift:
    rotation_deg: float
    translation: np.ndarray
    scale: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        t = math.radians(self.rotation_deg)
        c, s = math.cos(t), math.sin(t)
        y = x.copy()
        y[:, 0] = c * x[:, 0] - s * x[:, 1]
        y[:, 1] = s * x[:, 0] + c * x[:, 1]
        return y * self.scale + self.translation


def _draw_shift(spec: SyntheticSpec, rng: np.random.Generator) -> DomainShift:
    direction = rng.normal(size=spec.input_dim)
    translation = spec.translation_norm * direction / np.linalg.norm(direction)
    lo, hi = spec.scale_range
    scale = np.exp(rng.uniform(math.log(lo), math.log(hi), size=spec.input_dim))
    return DomainShift(spec.rotation_deg, translation, scale)


def _centers(spec: SyntheticSpec, rng) -> np.ndarray:
    centers = rng.normal(0.0, spec.sigma_between, size=(spec.num_classes, spec.input_dim))
    if spec.signal_dim is not None:
        centers[:, spec.signal_dim:] = 0.0
    return centers


def _samples(spec: SyntheticSpec, centers, per_class, cam_offsets, rng):
    labels = np.repeat(np.arange(centers.shape[0]), per_class)
    cams = _cameras(per_class, centers.shape[0], spec.cameras_per_domain)
    x = centers[labels] + rng.normal(0.0, spec.sigma_within, size=(labels.size, centers.shape[1]))
    if spec.signal_dim is not None and spec.nuisance_sigma > 0:
        x[:, spec.signal_dim:] += rng.normal(0.0, spec.nuisance_sigma,
                                             size=(labels.size, spec.input_dim - spec.signal_dim))
    return x + cam_offsets[cams], labels, cams


def _cameras(per_class: int, num_classes: int, cams: int) -> np.ndarray:
    return np.tile(np.arange(per_class) % cams, num_classes)


def generate(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticData:
    """Gaussian identity clusters; the target domain gets its own identities
    pushed through a rotation/scale/translation shift.

    Optional structure: identity lives in the first ``signal_dim`` dimensions
    while the rest carry ``nuisance_sigma`` noise, and each camera adds a fixed
    offset of spread ``camera_sigma``.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.input_dim
    src_centers = _centers(spec, rng)
    tgt_centers = src_centers.copy() if spec.share_centers else _centers(spec, rng)
    shift = _draw_shift(spec, rng)
    src_cams = rng.normal(0.0, spec.camera_sigma, size=(spec.cameras_per_domain, d))
    tgt_cams = rng.normal(0.0, spec.camera_sigma, size=(spec.cameras_per_domain, d))

    xs, ys, cs = _samples(spec, src_centers, spec.samples_per_class, src_cams, rng)
    xt, yt, ct = _samples(spec, tgt_centers, spec.samples_per_class, tgt_cams, rng)
    xq, yq, cq = _samples(spec, tgt_centers, spec.test_samples_per_class, tgt_cams, rng)
    xt, xq = shift.apply(xt), shift.apply(xq)

    n_s, n_t, n_q = len(ys), len(yt), len(yq)
    source = Dataset(xs, cs, np.arange(n_s), SOURCE, ys)
    target = Dataset(xt, ct, np.arange(n_s, n_s + n_t), TARGET)
    test = Dataset(xq, cq, np.arange(n_s + n_t, n_s + n_t + n_q), TARGET, yq)
    return SyntheticData(source, target, yt, test)


# --- CSV -------------------------------------------------------------------

def save_features(dataset: Dataset, path, labels: np.ndarray | None = None) -> None:
    """Write the feature CSV. ``labels`` overrides the dataset's own labels."""
    labels = dataset.labels if labels is None else labels
    d = dataset.dim
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["instance_id", "camera_id", "label", "dim"] + [f"f_{j}" for j in range(d)])
        for i in range(len(dataset)):
            label = NA if labels is None else str(int(labels[i]))
            writer.writerow([int(dataset.instance_ids[i]), int(dataset.cameras[i]), label, d]
                            + [repr(float(v)) for v in dataset.inputs[i]])


def load_features(path, domain: str = TARGET) -> Dataset:
    """Parse a feature CSV. Labels are kept only when every row has one."""
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = rows[0]
    if header[:4] != ["instance_id", "camera_id", "label", "dim"]:
        raise SchemaError(f"{path}:1: unexpected header {header[:4]}")
    dim = len(header) - 4
    if header[4:] != [f"f_{j}" for j in range(dim)] or dim < 1:
        raise SchemaError(f"{path}:1: feature columns must be f_0..f_{{dim-1}}")

    ids, cams, labels, feats = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            row_dim = int(row[3])
        except (IndexError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: bad dim field") from exc
        if row_dim != dim or len(row) - 4 != dim:
            raise SchemaError(f"{path}:{lineno}: expected {dim} features, row declares {row_dim} "
                              f"and has {len(row) - 4}")
        try:
            ids.append(int(row[0]))
            cams.append(int(row[1]))
            labels.append(None if row[2] == NA else int(row[2]))
            feats.append([float(v) for v in row[4:]])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc

    arr = np.array(feats, dtype=np.float64).reshape(-1, dim)
    lab = None if any(v is None for v in labels) or not labels else np.array(labels, dtype=np.int64)
    return Dataset(arr, np.array(cams, dtype=np.int64), np.array(ids, dtype=np.int64), domain, lab)


# --- PK sampling -----------------------------------------------------------

def pk_sample(labels, P: int = 4, K: int = 4, rng: np.random.Generator | int = 0) -> np.ndarray:
    """Indices of a batch of P distinct classes x K instances.

    Negative labels (outliers) are never drawn. Classes with fewer than K
    members are sampled with replacement.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    labels = np.asarray(labels)
    classes = np.unique(labels[labels >= 0])
    if classes.size < 2:
        raise DegenerateBatchError(f"need at least 2 usable classes, found {classes.size}")
    if P > classes.size:
        raise ValueError(f"P={P} exceeds the {classes.size} available classes")
    chosen = rng.choice(classes, size=P, replace=False)
    out = []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        out.append(rng.choice(members, size=K, replace=members.size < K))
    return np.concatenate(out)

"""Long-tailed class-conditional mixture datasets.

Each class is a Gaussian mixture with at least one low-weight "minor mode",
so per-class sample density is long-tailed: most points come from a dominant
high-density component while a small fraction lands in sparse satellites.
The exact mixture density is available as a ground-truth oracle, which real
image datasets never offer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WEIGHT_TOL = 1e-9
MINOR_MODE_MAX_WEIGHT = 0.1


class DatasetParseError(ValueError):
    """Malformed dataset file; carries the 1-based offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class MixtureSpec:
    """One class's mixture: (weight, mean, covariance) components in R^d."""

    class_id: int
    components: tuple[tuple[float, np.ndarray, np.ndarray], ...]
    dim: int

    def __post_init__(self):
        if not self.components:
            raise ValueError("mixture needs at least one component")
        total = sum(w for w, _, _ in self.components)
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"component weights sum to {total!r}, expected 1")
        for i, (w, mean, cov) in enumerate(self.components):
            if w <= 0:
                raise ValueError(f"component {i} has nonpositive weight {w}")
            if mean.shape != (self.dim,):
                raise ValueError(f"component {i} mean has shape {mean.shape}, "
                                 f"expected ({self.dim},)")
            if cov.shape != (self.dim, self.dim):
                raise ValueError(f"component {i} covariance has shape {cov.shape}")
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError(f"component {i} covariance not symmetric")
            eigvals = np.linalg.eigvalsh(cov)
            if eigvals.min() <= 0:
                raise ValueError(f"component {i} covariance not positive-definite "
                                 f"(min eigenvalue {eigvals.min():g})")
        if len(self.components) > 1 and not any(
                w <= MINOR_MODE_MAX_WEIGHT for w, _, _ in self.components):
            raise ValueError("multi-component class needs a minor mode "
                             f"(some weight <= {MINOR_MODE_MAX_WEIGHT})")

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _, _ in self.components])


@dataclass
class LabeledDataset:
    """Point cloud with integer class labels and provenance metadata."""

    points: np.ndarray          # (N, d) float64
    labels: np.ndarray          # (N,) int
    n_classes: int
    split_tag: str = "train"    # {train, holdout}
    rng_seed: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2:
            raise ValueError(f"points must be 2-D, got shape {self.points.shape}")
        if len(self.labels) != len(self.points):
            raise ValueError("points/labels length mismatch")
        if len(self.points) and not np.isfinite(self.points).all():
            raise ValueError("points contain non-finite values")
        if len(self.labels) and self.labels.max() >= self.n_classes:
            raise ValueError(f"label {self.labels.max()} out of range for "
                             f"{self.n_classes} classes")
        if self.split_tag not in ("train", "holdout"):
            raise ValueError(f"unknown split tag {self.split_tag!r}")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def class_points(self, y: int) -> np.ndarray:
        return self.points[self.labels == y]


def generate(spec_set: list[MixtureSpec], n_per_class: int, seed: int,
             split_tag: str = "train") -> LabeledDataset:
    """Draw `n_per_class` points per class by component-weighted ancestral
    sampling.  Deterministic in (spec_set, n_per_class, seed)."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if not spec_set:
        raise ValueError("empty spec set")
    dim = spec_set[0].dim
    rng = np.random.default_rng(seed)
    points, labels = [], []
    for spec in spec_set:
        comp_idx = rng.choice(len(spec.components), size=n_per_class,
                              p=spec.weights)
        for i, (_, mean, cov) in enumerate(spec.components):
            n_i = int(np.sum(comp_idx == i))
            if n_i == 0:
                continue
            chol = np.linalg.cholesky(cov)
            draws = mean + rng.standard_normal((n_i, dim)) @ chol.T
            points.append(draws)
            labels.append(np.full(n_i, spec.class_id))
    return LabeledDataset(points=np.concatenate(points),
                          labels=np.concatenate(labels),
                          n_classes=max(s.class_id for s in spec_set) + 1,
                          split_tag=split_tag, rng_seed=seed)


def true_density(spec: MixtureSpec, x: np.ndarray) -> np.ndarray | float:
    """Exact mixture density sum_j w_j N(x; m_j, S_j).

    Accepts a single point (d,) or a batch (N, d); returns matching shape.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    if not np.isfinite(pts).all():
        raise ValueError("query points must be finite")
    dens = np.zeros(len(pts))
    for w, mean, cov in spec.components:
        diff = pts - mean
        chol = np.linalg.cholesky(cov)
        sol = np.linalg.solve(chol, diff.T)
        maha = np.sum(sol**2, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        norm = -0.5 * (spec.dim * np.log(2 * np.pi) + logdet)
        dens += w * np.exp(norm - 0.5 * maha)
    return float(dens[0]) if single else dens


def split_train_holdout(ds: LabeledDataset, holdout_frac: float = 0.2,
                        seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified per-class split; holdout gets round(frac * n_y) from each
    class."""
    if not 0 < holdout_frac < 1:
        raise ValueError(f"holdout_frac must be in (0,1), got {holdout_frac}")
    rng = np.random.default_rng(seed)
    train_idx, hold_idx = [], []
    for y in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == y)
        perm = rng.permutation(idx)
        n_hold = int(round(holdout_frac * len(idx)))
        hold_idx.append(perm[:n_hold])
        train_idx.append(perm[n_hold:])
    train_idx = np.sort(np.concatenate(train_idx))
    hold_idx = np.sort(np.concatenate(hold_idx))
    train = LabeledDataset(ds.points[train_idx], ds.labels[train_idx],
                           ds.n_classes, "train", ds.rng_seed)
    hold = LabeledDataset(ds.points[hold_idx], ds.labels[hold_idx],
                          ds.n_classes, "holdout", ds.rng_seed)
    return train, hold


# ---------------------------------------------------------------------------
# Dataset files: a self-describing text header followed by one row per point.
# Floats are written with repr() so the round-trip is bit-exact.

_MAGIC = "# lowdens dataset v1"


def save(ds: LabeledDataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(_MAGIC + "\n")
        fh.write(f"dim {ds.dim if len(ds) else 0}\n")
        fh.write(f"classes {ds.n_classes}\n")
        fh.write(f"seed {ds.rng_seed}\n")
        fh.write(f"split {ds.split_tag}\n")
        fh.write(f"count {len(ds)}\n")
        for label, row in zip(ds.labels, ds.points):
            fh.write(str(int(label)) + " " + " ".join(repr(v) for v in row) + "\n")


def load(path: str | Path) -> LabeledDataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise DatasetParseError("missing dataset header", line=1)

    header: dict[str, str] = {}
    for lineno, text in enumerate(lines[1:6], start=2):
        parts = text.split(maxsplit=1)
        if len(parts) != 2:
            raise DatasetParseError(f"malformed header entry {text!r}", line=lineno)
        header[parts[0]] = parts[1]
    missing = [k for k in ("dim", "classes", "seed", "split", "count")
               if k not in header]
    if missing:
        raise DatasetParseError(f"missing header keys {missing}", line=2)
    try:
        dim = int(header["dim"])
        n_classes = int(header["classes"])
        seed = int(header["seed"])
        count = int(header["count"])
    except ValueError as exc:
        raise DatasetParseError(f"bad header value: {exc}", line=2) from exc

    rows = lines[6:]
    if len(rows) < count:
        raise DatasetParseError(f"expected {count} rows, file has {len(rows)}",
                                line=len(lines) + 1)
    points = np.zeros((count, dim))
    labels = np.zeros(count, dtype=np.int64)
    for i in range(count):
        lineno = 7 + i
        fields = rows[i].split()
        if len(fields) != dim + 1:
            raise DatasetParseError(
                f"expected {dim + 1} fields, got {len(fields)}", line=lineno)
        try:
            labels[i] = int(fields[0])
            points[i] = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise DatasetParseError(str(exc), line=lineno) from exc
    return LabeledDataset(points=points, labels=labels, n_classes=n_classes,
                          split_tag=header["split"], rng_seed=seed)


# ---------------------------------------------------------------------------
# Default desk-scale world: 2-D, 4 classes, 3 components each with weights
# (0.80, 0.15, 0.05).  Class hubs sit on a ring; each class has a mid-weight
# satellite offset tangentially and a rare satellite pushed radially outward,
# giving a pronounced long tail that stays inside a ~[-4, 4]^2 box.

DEFAULT_WEIGHTS = (0.80, 0.15, 0.05)


def default_world(n_classes: int = 4, radius: float = 2.4) -> list[MixtureSpec]:
    specs = []
    for c in range(n_classes):
        phi = 2 * np.pi * c / n_classes
        radial = np.array([np.cos(phi), np.sin(phi)])
        tangent = np.array([-np.sin(phi), np.cos(phi)])
        rot = np.column_stack([radial, tangent])
        hub_cov = rot @ np.diag([0.09, 0.055]) @ rot.T
        components = (
            (DEFAULT_WEIGHTS[0], radius * radial, hub_cov),
            (DEFAULT_WEIGHTS[1], radius * radial + 1.05 * tangent,
             0.035 * np.eye(2)),
            (DEFAULT_WEIGHTS[2], (radius + 1.45) * radial, 0.02 * np.eye(2)),
        )
        specs.append(MixtureSpec(class_id=c, components=components, dim=2))
    return specs

"""Principal component analysis over descriptor rows.

The fit is a reduction over a streamed covariance accumulator: one pass for
the mean, a second for the centred scatter matrix. Covariance is the
population one (divide by N). Each component is oriented so that its
largest-magnitude entry is positive.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class PcaError(ValueError):
    pass


class DimensionMismatch(PcaError):
    pass


class RankDeficient(UserWarning):
    """Fewer non-zero eigenvalues than requested components."""


class MeanAccumulator:
    def __init__(self, dim):
        self.n = 0
        self.total = np.zeros(dim)

    def add(self, rows):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        self.n += len(rows)
        self.total += rows.sum(axis=0)
        return self

    def merge(self, other):
        self.n += other.n
        self.total += other.total
        return self

    @property
    def mean(self):
        if self.n == 0:
            raise PcaError("no rows")
        return self.total / self.n


class ScatterAccumulator:
    """Sum of (x - mean)(x - mean)^T for a mean fixed by the first pass."""

    def __init__(self, mean):
        self.mean = np.asarray(mean, dtype=float)
        self.n = 0
        self.scatter = np.zeros((len(self.mean), len(self.mean)))

    def add(self, rows):
        centred = np.atleast_2d(np.asarray(rows, dtype=float)) - self.mean
        self.n += len(centred)
        self.scatter += centred.T @ centred
        return self

    def merge(self, other):
        self.n += other.n
        self.scatter += other.scatter
        return self

    @property
    def covariance(self):
        return self.scatter / self.n


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray            # (k, dim), orthonormal rows
    explained_variance: np.ndarray    # (k,), descending
    n_samples: int = 0
    requested_k: int = 0
    rank_deficient: bool = False
    total_variance: float = 0.0
    scores: np.ndarray | None = field(default=None, repr=False)

    @property
    def k(self):
        return len(self.components)

    @property
    def dim(self):
        return len(self.mean)

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "total_variance": self.total_variance,
            "n_samples": self.n_samples,
            "requested_k": self.requested_k,
            "rank_deficient": self.rank_deficient,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            mean=np.asarray(d["mean"], dtype=float),
            components=np.asarray(d["components"], dtype=float).reshape(-1, len(d["mean"])),
            explained_variance=np.asarray(d["explained_variance"], dtype=float),
            n_samples=d.get("n_samples", 0),
            requested_k=d.get("requested_k", len(d["components"])),
            rank_deficient=d.get("rank_deficient", False),
            total_variance=d.get("total_variance", 0.0),
        )


def orient(components):
    """Flip each row so its largest-magnitude entry (first on ties) is positive."""
    comps = np.array(components, dtype=float)
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return comps


def model_from_covariance(mean, cov, k, n_samples):
    """Top-k eigenpairs of ``cov`` as a PcaModel; warns when rank < k."""
    if k < 1:
        raise PcaError("k must be >= 1")
    dim = len(mean)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = max(float(evals[0]), 0.0) if dim else 0.0
    tol = top * max(dim, n_samples) * np.finfo(float).eps * 10
    rank = int(np.sum(evals > tol))
    achievable = min(k, rank, dim)
    deficient = achievable < k
    if deficient:
        warnings.warn(f"only {achievable} non-zero eigenvalues; requested k={k}",
                      RankDeficient, stacklevel=3)
    return PcaModel(
        mean=np.asarray(mean, dtype=float),
        components=orient(evecs[:, :achievable].T),
        explained_variance=np.clip(evals[:achievable], 0.0, None),
        n_samples=n_samples,
        requested_k=k,
        rank_deficient=deficient,
        total_variance=float(np.trace(cov)),
    )


def fit_pca(descriptors, k):
    """Fit on an (n, dim) matrix; keeps the training scores on the model."""
    X = np.asarray(descriptors, dtype=float)
    if X.ndim != 2:
        raise PcaError("descriptors must be a 2-D matrix")
    if not len(X) >= k >= 1:
        raise PcaError(f"need rows >= k >= 1, got rows={len(X)}, k={k}")
    model = fit_pca_stream(lambda: iter((X,)), k, dim=X.shape[1])
    model.scores = project(model, X)
    return model


def fit_pca_stream(blocks, k, dim=None):
    """Fit from ``blocks()``, a callable returning a fresh iterator of row blocks.

    Called twice (mean pass, scatter pass); memory is O(dim^2).
    """
    mean_acc = None
    for block in blocks():
        block = np.atleast_2d(np.asarray(block, dtype=float))
        if mean_acc is None:
            mean_acc = MeanAccumulator(dim or block.shape[1])
        mean_acc.add(block)
    if mean_acc is None or mean_acc.n < k:
        raise PcaError(f"need rows >= k, got {0 if mean_acc is None else mean_acc.n}")
    scatter = ScatterAccumulator(mean_acc.mean)
    for block in blocks():
        scatter.add(block)
    if scatter.n != mean_acc.n:
        raise PcaError("row blocks changed between passes")
    return model_from_covariance(mean_acc.mean, scatter.covariance, k, mean_acc.n)


def project(model: PcaModel, d):
    """(d - mean) @ components^T for one vector or a matrix of rows."""
    d = np.asarray(d, dtype=float)
    if d.shape[-1] != model.dim:
        raise DimensionMismatch(f"descriptor has dim {d.shape[-1]}, model expects {model.dim}")
    return (d - model.mean) @ model.components.T


def reconstruct(model: PcaModel, points):
    return np.asarray(points, dtype=float) @ model.components + model.mean

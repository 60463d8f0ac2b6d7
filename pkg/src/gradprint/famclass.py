"""Family classification over fingerprint vectors.

Pipeline: z-score normalization, PCA projection, Lloyd iterations started
from the base models' projected fingerprints, then nearest-centroid
classification with an out-of-cluster distance threshold. A randomly
initialized K-Means is provided as the comparison baseline.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import __version__
from .errors import EmptyBases, EmptyInput, InsufficientSamples, TooFewPoints
from .fingerprint import FIELDS, Fingerprint, vectorize
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)

REGISTRY_SCHEMA = "gradprint.registry/1"
DEFAULT_THRESHOLD = 7.0
CONFIDENCE_CAP = 1e6
MAX_ITER = 300
TOL = 1e-6


@dataclass
class Normalizer:
    means: np.ndarray
    stds: np.ndarray

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        safe = np.where(self.stds > 0, self.stds, 1.0)
        return np.where(self.stds > 0, (v - self.means) / safe, 0.0)


def fit_normalizer(vectors) -> Normalizer:
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if X.size == 0 or X.shape[0] == 0:
        raise EmptyInput("cannot fit a normalizer on no vectors")
    return Normalizer(X.mean(axis=0), X.std(axis=0))


@dataclass
class PcaBasis:
    mean: np.ndarray  # [D]
    components: np.ndarray  # [k, D], orthonormal rows
    explained_variance: np.ndarray  # [k]

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def project(self, v: np.ndarray) -> np.ndarray:
        """Coordinates of ``v`` (one vector or rows of a matrix)."""
        return (np.asarray(v, dtype=np.float64) - self.mean) @ self.components.T


def fit_pca(X: np.ndarray, k: int = 2) -> PcaBasis:
    """Top-``k`` principal axes from the (population) covariance of ``X``.

    Each axis is signed so that its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, dim = X.shape
    if n < 2 or not 1 <= k <= min(n - 1, dim):
        raise InsufficientSamples(f"PCA with k={k} needs N >= k + 1 samples, got N={n}")
    mean = X.mean(axis=0)
    C = X - mean
    cov = C.T @ C / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return PcaBasis(mean, comps, np.clip(evals[order], 0.0, None))


def project(basis: PcaBasis, v: np.ndarray) -> np.ndarray:
    return basis.project(v)


# -- Lloyd iterations ---------------------------------------------------------------

@dataclass
class LloydResult:
    labels: np.ndarray
    centroids: np.ndarray
    iterations: int
    inertia_trace: list[float]

    @property
    def inertia(self) -> float:
        return self.inertia_trace[-1]


def _assign(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, float]:
    d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, float(d2[np.arange(len(X)), labels].sum())


def lloyd(X: np.ndarray, init: np.ndarray, max_iter: int = MAX_ITER, tol: float = TOL) -> LloydResult:
    """Lloyd iterations from ``init``; centroid ``i`` keeps index ``i`` throughout.

    Empty clusters keep their previous centroid. ``inertia_trace[t]`` is the
    within-cluster sum of squares after the assignment step of iteration t.
    """
    X = np.asarray(X, dtype=np.float64)
    centroids = np.array(init, dtype=np.float64, copy=True)
    trace = []
    labels = np.zeros(len(X), dtype=int)
    for it in range(1, max_iter + 1):
        labels, inertia = _assign(X, centroids)
        trace.append(inertia)
        updated = centroids.copy()
        for c in range(len(centroids)):
            members = X[labels == c]
            if len(members):
                updated[c] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(updated - centroids, axis=1))) if len(centroids) else 0.0
        centroids = updated
        if shift < tol:
            break
    labels, inertia = _assign(X, centroids)
    if inertia < trace[-1]:
        trace.append(inertia)
    return LloydResult(labels, centroids, it, trace)


def standard_kmeans(X: np.ndarray, n_clusters: int, seed: int) -> LloydResult:
    """K-Means from ``n_clusters`` distinct data points chosen uniformly at random."""
    X = np.asarray(X, dtype=np.float64)
    if n_clusters < 1 or n_clusters > len(X):
        raise TooFewPoints(f"{n_clusters} clusters need at least as many points, got {len(X)}")
    stream = SplitMix64(derive_seed(seed, "kmeans|init"))
    picks = stream.sample_without_replacement(len(X), n_clusters)
    return lloyd(X, X[picks])


def best_permutation_accuracy(labels: Sequence[int], truth: Sequence[int]) -> float:
    """Accuracy under the best one-to-one relabelling of clusters."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    k = int(max(labels.max(), truth.max())) + 1
    counts = np.zeros((k, k), dtype=int)
    np.add.at(counts, (labels, truth), 1)
    rows, cols = linear_sum_assignment(-counts)
    return counts[rows, cols].sum() / len(labels)


# -- registry -------------------------------------------------------------------

@dataclass
class Registry:
    normalizer: Normalizer
    basis: PcaBasis
    centroids: np.ndarray  # [F, k]
    families: list[str]
    threshold: float = DEFAULT_THRESHOLD
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.families:
            raise EmptyBases("registry needs at least one family")
        if len(set(self.families)) != len(self.families):
            raise ValueError("family names must be unique")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")

    def embed(self, fp: Fingerprint | np.ndarray) -> np.ndarray:
        v = vectorize(fp) if isinstance(fp, Fingerprint) else np.asarray(fp, dtype=np.float64)
        return self.basis.project(self.normalizer.apply(v))

    def to_dict(self) -> dict:
        return {
            "schema": REGISTRY_SCHEMA,
            "features": list(FIELDS),
            "normalizer": {"means": self.normalizer.means.tolist(), "stds": self.normalizer.stds.tolist()},
            "pca": {
                "mean": self.basis.mean.tolist(),
                "components": self.basis.components.tolist(),
                "explained_variance": self.basis.explained_variance.tolist(),
            },
            "centroids": self.centroids.tolist(),
            "families": list(self.families),
            "threshold": float(self.threshold),
            "threshold_space": "pca-projected z-scored features",
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Registry":
        if d.get("schema") != REGISTRY_SCHEMA:
            raise ValueError(f"unsupported registry schema {d.get('schema')!r}")
        arr = lambda v: np.asarray(v, dtype=np.float64)  # noqa: E731
        return cls(
            Normalizer(arr(d["normalizer"]["means"]), arr(d["normalizer"]["stds"])),
            PcaBasis(arr(d["pca"]["mean"]), np.atleast_2d(arr(d["pca"]["components"])),
                     arr(d["pca"]["explained_variance"])),
            np.atleast_2d(arr(d["centroids"])),
            list(d["families"]),
            float(d["threshold"]),
            dict(d.get("provenance", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "Registry":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Registry":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())


@dataclass
class CentroidFit:
    registry: Registry
    result: LloydResult
    points: np.ndarray  # projected bases followed by members


def fit_centroid_kmeans_detailed(
    base_fps: Sequence[Fingerprint],
    member_fps: Sequence[Fingerprint] = (),
    families: Sequence[str] | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    k: int = 2,
    seed: int | None = None,
) -> CentroidFit:
    if not base_fps:
        raise EmptyBases("at least one base fingerprint is required")
    families = list(families) if families is not None else [fp.model_name for fp in base_fps]
    if len(families) != len(base_fps):
        raise ValueError("one family name per base fingerprint")
    raw = np.array([vectorize(fp) for fp in list(base_fps) + list(member_fps)])
    normalizer = fit_normalizer(raw)
    Z = normalizer.apply(raw)
    k_eff = min(k, len(raw) - 1, Z.shape[1])
    if k_eff < k:
        log.warning("reducing PCA components from %d to %d for %d fingerprints", k, k_eff, len(raw))
    basis = fit_pca(Z, k_eff)
    P = basis.project(Z)
    result = lloyd(P, P[: len(base_fps)])
    counts = np.bincount(result.labels, minlength=len(families))
    provenance = {
        "tool_version": __version__,
        "seed": seed,
        "bases": [fp.model_name for fp in base_fps],
        "member_count": len(member_fps),
        "cluster_sizes": {f: int(c) for f, c in zip(families, counts)},
        "lloyd_iterations": result.iterations,
        "normalization_fit": "bases+members",
    }
    registry = Registry(normalizer, basis, result.centroids, families, threshold, provenance)
    return CentroidFit(registry, result, P)


def fit_centroid_kmeans(
    base_fps: Sequence[Fingerprint],
    member_fps: Sequence[Fingerprint] = (),
    families: Sequence[str] | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    k: int = 2,
    seed: int | None = None,
) -> Registry:
    """Fit a registry whose centroids start at the base models' fingerprints."""
    return fit_centroid_kmeans_detailed(base_fps, member_fps, families, threshold, k, seed).registry


# -- distances and classification ---------------------------------------------------

@dataclass
class DistanceReport:
    distance: float
    normalized: bool
    space: str

    def to_dict(self) -> dict:
        return {"distance": self.distance, "normalized": self.normalized, "space": self.space}


def pairwise_distance(fp_a: Fingerprint, fp_b: Fingerprint, registry: Registry | None = None) -> DistanceReport:
    if registry is None:
        return DistanceReport(float(np.linalg.norm(vectorize(fp_a) - vectorize(fp_b))), False, "raw")
    return DistanceReport(float(np.linalg.norm(registry.embed(fp_a) - registry.embed(fp_b))), True, "pca")


@dataclass
class ClassificationReport:
    model_name: str
    family: str | None  # None means out of cluster
    distances: dict[str, float]
    min_distance: float
    threshold: float
    confidence: float

    @property
    def out_of_cluster(self) -> bool:
        return self.family is None

    @property
    def verdict(self) -> str:
        return "OutOfCluster" if self.family is None else "Family"

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "verdict": self.verdict,
            "family": self.family,
            "distances": self.distances,
            "min_distance": self.min_distance,
            "threshold": self.threshold,
            "confidence": self.confidence,
        }


def classify_unknown(registry: Registry, fp: Fingerprint) -> ClassificationReport:
    p = registry.embed(fp)
    dist = np.linalg.norm(registry.centroids - p, axis=1)
    order = np.argsort(dist, kind="stable")
    best = float(dist[order[0]])
    if len(order) > 1:
        second = float(dist[order[1]])
        confidence = min(second / best, CONFIDENCE_CAP) if best > 0 else CONFIDENCE_CAP
    else:
        confidence = CONFIDENCE_CAP
    family = registry.families[order[0]] if best <= registry.threshold else None
    return ClassificationReport(
        fp.model_name,
        family,
        {f: float(d) for f, d in zip(registry.families, dist)},
        best,
        float(registry.threshold),
        float(confidence),
    )

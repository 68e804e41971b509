"""Nonlinear 2-D embedding of band spectra and hyperparameter search.

Implements the fuzzy-graph embedding pipeline in full: exact k-nearest
neighbors (the datasets here are a few thousand 16-D points, so brute
force is both exact and fast), per-point bandwidth calibration by
bisection, fuzzy set union symmetrization, least-squares fit of the
low-dimensional similarity curve, and stochastic gradient descent with
negative sampling over the resulting edge set. Everything is
deterministic for a fixed seed.

Hyperparameters are chosen by random search. Each trial is scored by the
KL divergence between the high-dimensional edge memberships and the
corresponding low-dimensional similarities (an embedding-fidelity score);
phase separation is reported separately as a silhouette so that model
selection never optimizes for the quantity used to validate separation.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse
from scipy.cluster.vq import kmeans2
from scipy.optimize import curve_fit

BISECTION_TOL = 1e-5
MIN_SIGMA_SCALE = 1e-3
GRAD_CLIP = 4.0


@dataclass(frozen=True)
class UmapParams:
    """Embedding hyperparameters; ranges follow the search space."""

    min_dist: float = 0.1
    n_neighbors: int = 15
    n_components: int = 2
    n_epochs: int = 500
    negative_sample_rate: int = 5
    repulsion_strength: float = 1.0
    initial_alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.min_dist < 1.0:
            raise ValueError(f"min_dist must be in (0, 1), got {self.min_dist}")
        if not 2 <= self.n_neighbors <= 100:
            raise ValueError(f"n_neighbors must be in [2, 100], got {self.n_neighbors}")
        if self.n_components != 2:
            raise ValueError("only 2-D embeddings are supported")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be at least 1")


def exact_knn(data: np.ndarray, n_neighbors: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k-nearest neighbors under Euclidean distance, self excluded."""
    sq = np.sum(data**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (data @ data.T)
    np.fill_diagonal(d2, np.inf)
    np.maximum(d2, 0.0, out=d2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :n_neighbors]
    dists = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return order, dists


def smooth_knn_bandwidths(
    knn_dists: np.ndarray,
    n_neighbors: int,
    tol: float = BISECTION_TOL,
    max_iter: int = 256,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-point (sigma, rho) so memberships sum to log2(n_neighbors).

    rho_i is the distance to the nearest distinct neighbor; sigma_i is
    found by bisection on the monotone membership sum. Returns the final
    residual per point so callers can verify convergence.
    """
    n = knn_dists.shape[0]
    target = math.log2(n_neighbors)
    positive = np.where(knn_dists > 0.0, knn_dists, np.inf)
    rho = np.min(positive, axis=1)
    rho = np.where(np.isfinite(rho), rho, 0.0)

    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    mid = np.ones(n)

    def membership_sum(sigma: np.ndarray) -> np.ndarray:
        adj = knn_dists - rho[:, None]
        with np.errstate(divide="ignore", invalid="ignore", under="ignore"):
            terms = np.where(adj > 0.0, np.exp(-adj / sigma[:, None]), 1.0)
        return terms.sum(axis=1)

    done = np.zeros(n, dtype=bool)
    for _ in range(max_iter):
        psum = membership_sum(mid)
        done = np.abs(psum - target) < tol
        if done.all():
            break
        too_big = psum > target
        hi = np.where(~done & too_big, mid, hi)
        lo = np.where(~done & ~too_big, mid, lo)
        grow = ~done & ~too_big & np.isinf(hi)
        mid = np.where(done, mid, np.where(grow, mid * 2.0, (lo + hi) / 2.0))

    sigmas = mid
    # Guard against collapsed bandwidths on pathological neighborhoods.
    mean_dist = knn_dists.mean() if knn_dists.size else 0.0
    row_mean = knn_dists.mean(axis=1)
    floor = np.where(rho > 0.0, MIN_SIGMA_SCALE * row_mean, MIN_SIGMA_SCALE * mean_dist)
    sigmas = np.maximum(sigmas, floor)
    residuals = np.abs(membership_sum(sigmas) - target)
    return sigmas, rho, residuals


def membership_strengths(
    knn_indices: np.ndarray,
    knn_dists: np.ndarray,
    sigmas: np.ndarray,
    rhos: np.ndarray,
) -> scipy.sparse.coo_matrix:
    """Directed fuzzy memberships of each point to its neighbors."""
    n, k = knn_indices.shape
    rows = np.repeat(np.arange(n), k)
    cols = knn_indices.ravel()
    adj = knn_dists - rhos[:, None]
    with np.errstate(under="ignore"):
        vals = np.where(
            (adj <= 0.0) | (sigmas[:, None] == 0.0),
            1.0,
            np.exp(-adj / sigmas[:, None]),
        ).ravel()
    return scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(n, n))


def fuzzy_union(graph: scipy.sparse.coo_matrix) -> scipy.sparse.coo_matrix:
    """Symmetrize memberships: w = w1 + w2 - w1 * w2."""
    dense = graph.toarray()
    sym = dense + dense.T - dense * dense.T
    return scipy.sparse.coo_matrix(sym)


def fit_curve_params(min_dist: float, spread: float = 1.0) -> tuple[float, float]:
    """Least-squares (a, b) for the low-dim similarity 1 / (1 + a d^(2b)).

    The target curve is 1 below ``min_dist`` and decays exponentially with
    unit spread beyond it, so embedded neighbors closer than ``min_dist``
    are not pulled further together.
    """

    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2.0 * b))

    xv = np.linspace(0.0, spread * 3.0, 300)
    yv = np.where(xv < min_dist, 1.0, np.exp(-(xv - min_dist) / spread))
    params, _ = curve_fit(curve, xv, yv)
    return float(params[0]), float(params[1])


def low_dim_similarity(dist_sq, a: float, b: float):
    return 1.0 / (1.0 + a * dist_sq**b)


def attractive_grad_coeff(dist_sq, a: float, b: float):
    """Coefficient c so that the attractive SGD move is alpha * c * (yi - yj).

    Equals minus the gradient coefficient of -log(similarity), so applying
    it directly performs gradient descent on the attractive term.
    """
    return -2.0 * a * b * dist_sq ** (b - 1.0) / (a * dist_sq**b + 1.0)


def repulsive_grad_coeff(dist_sq, a: float, b: float, gamma: float = 1.0, eps: float = 0.001):
    """Coefficient of the repulsive SGD move, alpha * c * (yi - yk).

    ``eps`` is the stabilizer added to the squared distance during
    optimization; set it to 0 to obtain the exact gradient of
    -log(1 - similarity).
    """
    return 2.0 * gamma * b / ((eps + dist_sq) * (a * dist_sq**b + 1.0))


def make_epochs_per_sample(weights: np.ndarray, n_epochs: int) -> np.ndarray:
    """Sampling period per edge so edge e fires ~ n_epochs * w_e / w_max times."""
    result = -1.0 * np.ones(weights.shape[0])
    n_samples = n_epochs * (weights / weights.max())
    result[n_samples > 0] = float(n_epochs) / n_samples[n_samples > 0]
    return result


@numba.njit(cache=True, inline="always")
def _clip_grad(val):
    if val > GRAD_CLIP:
        return GRAD_CLIP
    if val < -GRAD_CLIP:
        return -GRAD_CLIP
    return val


@numba.njit(cache=True, inline="always")
def _rand_index(state, n):
    # xorshift64* stream; uniform enough for negative sampling
    x = state[0]
    x ^= x >> np.uint64(12)
    x ^= x << np.uint64(25)
    x ^= x >> np.uint64(27)
    state[0] = x
    return np.int64((x * np.uint64(2685821657736338717)) >> np.uint64(33)) % n


@numba.njit(cache=True)
def _optimize_layout(
    embedding,
    head,
    tail,
    epochs_per_sample,
    a,
    b,
    gamma,
    initial_alpha,
    negative_sample_rate,
    n_epochs,
    rng_state,
):
    n_vertices = embedding.shape[0]
    dim = embedding.shape[1]
    n_edges = head.shape[0]
    epoch_of_next_sample = epochs_per_sample.copy()
    if negative_sample_rate > 0:
        epochs_per_negative = epochs_per_sample / negative_sample_rate
    else:
        epochs_per_negative = epochs_per_sample
    epoch_of_next_negative = epochs_per_negative.copy()

    for epoch in range(n_epochs):
        alpha = initial_alpha * (1.0 - epoch / n_epochs)
        for e in range(n_edges):
            if epoch_of_next_sample[e] > epoch:
                continue
            i = head[e]
            j = tail[e]
            dist_sq = 0.0
            for d in range(dim):
                diff = embedding[i, d] - embedding[j, d]
                dist_sq += diff * diff
            if dist_sq > 0.0:
                grad_coeff = -2.0 * a * b * dist_sq ** (b - 1.0) / (a * dist_sq**b + 1.0)
            else:
                grad_coeff = 0.0
            for d in range(dim):
                grad_d = _clip_grad(grad_coeff * (embedding[i, d] - embedding[j, d]))
                embedding[i, d] += grad_d * alpha
                embedding[j, d] -= grad_d * alpha
            epoch_of_next_sample[e] += epochs_per_sample[e]

            if negative_sample_rate > 0:
                n_neg = int((epoch - epoch_of_next_negative[e]) / epochs_per_negative[e])
                for _ in range(n_neg):
                    k = _rand_index(rng_state, n_vertices)
                    if k == i:
                        continue
                    dist_sq = 0.0
                    for d in range(dim):
                        diff = embedding[i, d] - embedding[k, d]
                        dist_sq += diff * diff
                    if dist_sq > 0.0:
                        grad_coeff = (
                            2.0 * gamma * b / ((0.001 + dist_sq) * (a * dist_sq**b + 1.0))
                        )
                    else:
                        grad_coeff = 0.0
                    for d in range(dim):
                        if grad_coeff > 0.0:
                            grad_d = _clip_grad(grad_coeff * (embedding[i, d] - embedding[k, d]))
                        else:
                            grad_d = GRAD_CLIP
                        embedding[i, d] += grad_d * alpha
                epoch_of_next_negative[e] += n_neg * epochs_per_negative[e]
    return embedding


def _pca_init(data: np.ndarray, rng: np.random.Generator, max_coord: float = 10.0) -> np.ndarray:
    centered = data - data.mean(axis=0)
    cov = centered.T @ centered
    _, vecs = np.linalg.eigh(cov)
    coords = centered @ vecs[:, -2:][:, ::-1]
    peak = np.abs(coords).max()
    if peak > 0:
        coords = coords * (max_coord / peak)
    return coords + rng.normal(0.0, 1e-4, coords.shape)


@dataclass
class EmbeddingModel:
    """Fitted embedding: graph, bandwidths, curve constants, coordinates."""

    params: UmapParams
    coordinates: np.ndarray
    knn_indices: np.ndarray
    knn_dists: np.ndarray
    sigmas: np.ndarray
    rhos: np.ndarray
    bisection_residuals: np.ndarray
    graph: scipy.sparse.coo_matrix
    a: float
    b: float


def as_matrix(spectra) -> np.ndarray:
    """Accept an (n, d) array, a SpectrumSeries, or a list of samples."""
    if hasattr(spectra, "matrix"):
        return spectra.matrix()
    if isinstance(spectra, (list, tuple)) and spectra and hasattr(spectra[0], "bands"):
        return np.stack([s.bands for s in spectra])
    return np.asarray(spectra, dtype=np.float64)


def fit_umap(spectra, params: UmapParams) -> EmbeddingModel:
    """Fit the full embedding pipeline; deterministic for a fixed seed."""
    data = as_matrix(spectra)
    n = data.shape[0]
    if n < params.n_neighbors + 1:
        raise ValueError(
            f"need at least n_neighbors + 1 = {params.n_neighbors + 1} samples, got {n}"
        )
    knn_indices, knn_dists = exact_knn(data, params.n_neighbors)
    sigmas, rhos, residuals = smooth_knn_bandwidths(knn_dists, params.n_neighbors)
    graph = fuzzy_union(membership_strengths(knn_indices, knn_dists, sigmas, rhos))
    a, b = fit_curve_params(params.min_dist)

    seq = np.random.SeedSequence([params.seed, 0x1D])
    rng = np.random.default_rng(seq)
    embedding = np.ascontiguousarray(_pca_init(data, rng), dtype=np.float64)

    coo = graph.tocoo()
    weights = coo.data.copy()
    if weights.size:
        keep = weights >= weights.max() / params.n_epochs
        head = coo.row[keep].astype(np.int64)
        tail = coo.col[keep].astype(np.int64)
        kept = weights[keep]
        epochs_per_sample = make_epochs_per_sample(kept, params.n_epochs)
        rng_state = np.array(
            [rng.integers(1, np.iinfo(np.int64).max, dtype=np.int64)], dtype=np.uint64
        )
        _optimize_layout(
            embedding,
            head,
            tail,
            epochs_per_sample,
            float(a),
            float(b),
            float(params.repulsion_strength),
            float(params.initial_alpha),
            int(params.negative_sample_rate),
            int(params.n_epochs),
            rng_state,
        )

    return EmbeddingModel(
        params=params,
        coordinates=embedding,
        knn_indices=knn_indices,
        knn_dists=knn_dists,
        sigmas=sigmas,
        rhos=rhos,
        bisection_residuals=residuals,
        graph=graph,
        a=a,
        b=b,
    )


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Discrete KL divergence sum(p * ln(p / q)) in nats, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support sizes differ: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("distributions must be non-negative")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("distributions must sum to 1 within 1e-9")
    support = p > 0
    if np.any(q[support] == 0):
        raise ValueError("q must be positive wherever p is positive")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def embedding_score(model: EmbeddingModel, coordinates: np.ndarray | None = None) -> float:
    """Embedding fidelity: KL between high- and low-dimensional memberships.

    Both distributions are normalized over the same fuzzy-graph edge set;
    lower is better. ``coordinates`` overrides the model's own (used to
    score shuffled or reference layouts).
    """
    coo = model.graph.tocoo()
    if coo.nnz == 0:
        raise ValueError("model has an empty graph; was it fitted?")
    coords = model.coordinates if coordinates is None else np.asarray(coordinates)
    if coords is None:
        raise ValueError("model has no coordinates; was it fitted?")
    diffs = coords[coo.row] - coords[coo.col]
    dist_sq = np.sum(diffs**2, axis=1)
    high = coo.data / coo.data.sum()
    low_raw = low_dim_similarity(dist_sq, model.a, model.b)
    low = low_raw / low_raw.sum()
    return kl_divergence(high, low)


def silhouette(coordinates: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over all points for integer/boolean two-group labels."""
    coords = np.asarray(coordinates, dtype=np.float64)
    labels = np.asarray(labels)
    d = np.sqrt(
        np.maximum(
            np.sum(coords**2, axis=1)[:, None]
            + np.sum(coords**2, axis=1)[None, :]
            - 2.0 * coords @ coords.T,
            0.0,
        )
    )
    values = np.empty(coords.shape[0])
    for i in range(coords.shape[0]):
        same = labels == labels[i]
        same[i] = False
        other = labels != labels[i]
        if not same.any() or not other.any():
            values[i] = 0.0
            continue
        a = d[i, same].mean()
        b = d[i, other].mean()
        values[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(values.mean())


def two_means_agreement(coordinates: np.ndarray, labels: np.ndarray, seed: int = 0) -> float:
    """Fraction of points where 2-means cluster assignment matches the labels."""
    coords = np.asarray(coordinates, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size != 2:
        raise ValueError(f"expected exactly 2 label classes, got {classes.size}")
    truth = (labels == classes[1]).astype(np.int64)
    _, assigned = kmeans2(coords, 2, minit="++", seed=seed)
    agree = float(np.mean(assigned == truth))
    return max(agree, 1.0 - agree)


def phase_histogram_kl(
    coordinates: np.ndarray, labels: np.ndarray, bins: int = 32, smoothing: float = 1e-9
) -> float:
    """Alternative score: KL between per-phase 2-D coordinate histograms.

    Provided for comparison only; selection uses the fidelity score so that
    separation remains an independent validation quantity.
    """
    coords = np.asarray(coordinates, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size != 2:
        raise ValueError(f"expected exactly 2 label classes, got {classes.size}")
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    edges = [np.linspace(lo[d], lo[d] + span[d], bins + 1) for d in range(2)]
    hists = []
    for cls in classes:
        pts = coords[labels == cls]
        h, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=edges)
        h = h.ravel() + smoothing
        hists.append(h / h.sum())
    return kl_divergence(hists[0], hists[1])


@dataclass
class TrialRecord:
    trial: int
    params: UmapParams
    score: float
    silhouette: float
    wall_time_s: float
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and math.isfinite(self.score)


@dataclass
class SearchResult:
    trials: list[TrialRecord]
    best_index: int
    n_trials: int

    @property
    def best(self) -> UmapParams:
        return self.trials[self.best_index].params

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["trial", "min_dist", "n_neighbors", "seed", "score", "silhouette", "wall_time_s"]
            )
            for t in self.trials:
                writer.writerow(
                    [
                        t.trial,
                        f"{t.params.min_dist:.9f}",
                        t.params.n_neighbors,
                        t.params.seed,
                        f"{t.score:.9g}" if math.isfinite(t.score) else "nan",
                        f"{t.silhouette:.6f}",
                        f"{t.wall_time_s:.3f}",
                    ]
                )


def _run_trial(args) -> TrialRecord:
    index, data, labels, params, score_mode = args
    start = time.perf_counter()
    try:
        model = fit_umap(data, params)
        if score_mode == "phase_histogram":
            score = phase_histogram_kl(model.coordinates, labels)
        else:
            score = embedding_score(model)
        sil = silhouette(model.coordinates, labels)
        return TrialRecord(index, params, score, sil, time.perf_counter() - start)
    except Exception as exc:  # single-trial failures are recorded, not fatal
        return TrialRecord(
            index, params, float("nan"), float("nan"), time.perf_counter() - start, str(exc)
        )


def sample_search_params(n_trials: int, seed: int, n_epochs: int) -> list[UmapParams]:
    """Draw the full trial list up front: min_dist ~ U(0, 1), k ~ U{2..100}."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EA]))
    params = []
    for t in range(n_trials):
        min_dist = float(rng.uniform(0.0, 1.0))
        while min_dist <= 0.0:
            min_dist = float(rng.uniform(0.0, 1.0))
        n_neighbors = int(rng.integers(2, 101))
        params.append(
            UmapParams(
                min_dist=min_dist,
                n_neighbors=n_neighbors,
                n_epochs=n_epochs,
                seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return params


def random_search(
    spectra_before,
    spectra_during,
    n_trials: int = 1000,
    seed: int = 0,
    n_epochs: int = 200,
    workers: int = 1,
    score_mode: str = "fidelity",
) -> SearchResult:
    """Random hyperparameter search over pooled before/during spectra.

    One fit per trial; the best trial minimizes the score (first trial wins
    ties). Failed trials are recorded with their error and skipped. Results
    are keyed by trial index, so the outcome is identical for any worker
    count.
    """
    before = as_matrix(spectra_before)
    during = as_matrix(spectra_during)
    if before.size == 0 or during.size == 0:
        raise ValueError("both phase sets must be non-empty")
    data = np.vstack([before, during])
    labels = np.concatenate([np.zeros(len(before)), np.ones(len(during))]).astype(np.int64)
    trial_params = sample_search_params(n_trials, seed, n_epochs)
    jobs = [(t, data, labels, p, score_mode) for t, p in enumerate(trial_params)]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = {rec.trial: rec for rec in pool.map(_run_trial, jobs)}
        trials = [results[t] for t in range(n_trials)]
    else:
        trials = [_run_trial(job) for job in jobs]

    best_index = -1
    best_score = math.inf
    for t in trials:
        if t.ok and t.score < best_score:
            best_score = t.score
            best_index = t.trial
    if best_index < 0:
        raise RuntimeError("all search trials failed")
    return SearchResult(trials=trials, best_index=best_index, n_trials=n_trials)


def export_embedding_plot(model: EmbeddingModel, labels, timestamps, png_path, csv_path) -> None:
    """Write the 2-D embedding as a phase-colored scatter PNG plus CSV."""
    coords = model.coordinates
    labels = list(labels)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if len(labels) != coords.shape[0] or timestamps.shape[0] != coords.shape[0]:
        raise ValueError(
            f"labels/timestamps ({len(labels)}/{timestamps.shape[0]}) do not match "
            f"{coords.shape[0]} embedded points"
        )
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "timestamp", "phase"])
        for (x, y), ts, phase in zip(coords, timestamps, labels):
            writer.writerow([f"{x:.9g}", f"{y:.9g}", f"{ts:.9f}", phase])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 6))
    seen = []
    for phase in labels:
        if phase not in seen:
            seen.append(phase)
    for phase in seen:
        mask = np.array([lab == phase for lab in labels])
        ax.scatter(coords[mask, 0], coords[mask, 1], s=8, alpha=0.7, label=str(phase))
    ax.set_xlabel("dimension 1")
    ax.set_ylabel("dimension 2")
    ax.legend(title="phase")
    ax.set_title("2-D embedding of ROI spectra")
    fig.tight_layout()
    fig.savefig(png_path, dpi=130)
    plt.close(fig)

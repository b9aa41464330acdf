"""Latent-space analysis: KNN smoothness, PCA, attention maps and latent walks"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial.distance import cdist

from relso import diffcore as dc
from relso.exceptions import ShapeError, ValidationError
from relso.models import Checkpoint, ReLSOModel
from relso.seqdata import hamming

logger = logging.getLogger(__name__)

DEFAULT_K = 10
PCA_TOL = 1e-13
PCA_MAX_ITERS = 20_000


@dataclass
class KnnGraph:
    n: int
    k: int
    adjacency: sparse.csr_matrix

    @property
    def edges(self):
        upper = sparse.triu(self.adjacency, k=1).tocoo()
        return sorted(zip(upper.row.tolist(), upper.col.tolist()))

    def dense(self):
        return self.adjacency.toarray()


@dataclass
class SmoothnessResult:
    value: float
    signal: str
    k: int
    n: int

    def as_row(self, representation):
        return {"representation": representation, "signal": self.signal, "value": self.value, "k": self.k, "n": self.n}


@dataclass
class PcaResult:
    coords: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray


@dataclass
class AttentionSummary:
    mean_map: np.ndarray
    positional: np.ndarray
    threshold: float


@dataclass
class WalkProfile:
    path: list
    sequences: list
    delta_fitness: np.ndarray
    delta_sequence: np.ndarray


def _as_model(model):
    if isinstance(model, Checkpoint):
        return ReLSOModel.from_checkpoint(model)
    return model.eval()


def knn_graph(points, k=DEFAULT_K):
    """Symmetric union of each point's k nearest neighbours (Euclidean)

    Distance ties resolve to the lower index.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if not n > k >= 1:
        raise ShapeError("knn_graph needs N > k >= 1, got N={} k={}".format(n, k))
    distances = cdist(points, points, metric="sqeuclidean")
    np.fill_diagonal(distances, np.inf)
    neighbours = np.argsort(distances, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    directed = sparse.csr_matrix((np.ones(n * k), (rows, neighbours.reshape(-1))), shape=(n, n))
    adjacency = directed.maximum(directed.T).tocsr()
    return KnnGraph(n=n, k=k, adjacency=adjacency)


def laplacian(graph):
    """Combinatorial Laplacian D - A as a sparse matrix"""
    return csgraph.laplacian(graph.adjacency)


def smoothness_index(graph, signal, name="fitness"):
    """(1/N) y^T L y, evaluated as the sum of squared differences over undirected edges

    A two-dimensional signal (N, C) sums the per-column values.
    """
    y = np.asarray(signal, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != graph.n:
        raise ShapeError("signal has {} entries for a graph of {} nodes".format(y.shape[0], graph.n))
    upper = sparse.triu(graph.adjacency, k=1).tocoo()
    diff = y[upper.row] - y[upper.col]
    value = float((diff * diff).sum()) / graph.n
    return SmoothnessResult(value=value, signal=name, k=graph.k, n=graph.n)


def onehot(sequences, alphabet):
    """Flattened one-hot residue vectors, (N, L * |residues|)"""
    lookup = {r: i for i, r in enumerate(alphabet.residues)}
    length = len(sequences[0])
    if any(len(s) != length for s in sequences):
        raise ShapeError("one-hot encoding needs sequences of equal length")
    out = np.zeros((len(sequences), length, len(lookup)))
    for row, sequence in enumerate(sequences):
        out[row, np.arange(length), [lookup[c] for c in sequence]] = 1.0
    return out.reshape(len(sequences), -1)


def onehot_signal(sequences, alphabet):
    """One-hot vectors scaled by 1/sqrt(L)

    The squared difference of two rows equals twice their length-normalized
    Hamming distance, so the sequence smoothness sums that over edges.
    """
    return onehot(sequences, alphabet) / np.sqrt(len(sequences[0]))


def encode_dataset(model, dataset, batch_size=256):
    model = _as_model(model)
    chunks = []
    with dc.no_grad():
        for start in range(0, len(dataset), batch_size):
            tokens = dataset.tokens[start : start + batch_size]
            width = model.config.max_len - tokens.shape[1]
            tokens = np.pad(tokens, ((0, 0), (0, width)))
            chunks.append(model.encode(tokens, dataset.lengths[start : start + batch_size]).z.data)
    return np.concatenate(chunks, axis=0)


def pca_project(points, n_components=2):
    """Project mean-centred points onto the top principal directions

    Directions come from power iteration with deflation on the covariance;
    each direction's first nonzero loading is positive.
    """
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    if n < n_components or n_components > d:
        raise ShapeError("pca_project needs N >= n_components and d >= n_components")
    mean = points.mean(axis=0)
    centred = points - mean
    covariance = centred.T @ centred / max(n - 1, 1)
    total = float(np.trace(covariance))
    if total <= 0:
        raise ValidationError("pca_project received zero-variance data")

    rng = np.random.default_rng(0)
    remaining = covariance.copy()
    components, variances = [], []
    for _ in range(n_components):
        vector = rng.normal(size=d)
        vector /= np.linalg.norm(vector)
        for _ in range(PCA_MAX_ITERS):
            image = remaining @ vector
            norm = np.linalg.norm(image)
            if norm == 0:
                break
            updated = image / norm
            done = np.linalg.norm(updated - vector) < PCA_TOL
            vector = updated
            if done:
                break
        nonzero = np.flatnonzero(np.abs(vector) > 1e-12)
        if nonzero.size and vector[nonzero[0]] < 0:
            vector = -vector
        value = max(float(vector @ covariance @ vector), 0.0)
        remaining = remaining - value * np.outer(vector, vector)
        components.append(vector)
        variances.append(value)

    components = np.array(components)
    variances = np.array(variances)
    return PcaResult(
        coords=centred @ components.T,
        components=components,
        explained_variance=variances,
        explained_variance_ratio=variances / total,
        mean=mean,
    )


def aggregate_attention(model, sequences, threshold_pct=0.0):
    """Mean attention over samples, layers and heads plus mean pooling weight per position

    Map entries below the ``threshold_pct`` percentile are zeroed.
    """
    model = _as_model(model)
    if not sequences:
        raise ValidationError("aggregate_attention needs at least one sequence")
    if len({len(s) for s in sequences}) != 1:
        raise ShapeError("aggregate_attention needs sequences of equal length")
    tokens, lengths = model.alphabet.encode_batch(sequences)
    with dc.no_grad():
        encoded = model.encode(tokens, lengths)
    if encoded.attention.shape[1] == 0:
        raise ValidationError("model has no attention layers")
    mean_map = encoded.attention.mean(axis=(0, 1, 2))
    threshold = float(np.percentile(mean_map, threshold_pct))
    mean_map = np.where(mean_map < threshold, 0.0, mean_map)
    positional = encoded.pool_weights.data.mean(axis=0)
    return AttentionSummary(mean_map=mean_map, positional=positional, threshold=threshold)


def latent_walk_profile(model, points, fitness, start, end, n_steps):
    """Greedy walk from ``points[start]`` to ``points[end]`` through encoded points

    Each step moves to the nearest point strictly closer to the endpoint;
    when there is none, or ``n_steps`` is reached, the walk jumps to the end.
    Per step it records the absolute fitness gap and the Hamming distance of
    the decoded sequence to those of the endpoint.
    """
    if n_steps < 2:
        raise ShapeError("a latent walk needs at least 2 steps")
    model = _as_model(model)
    points = np.asarray(points, dtype=np.float64)
    fitness = np.asarray(fitness, dtype=np.float64)
    target = points[end]
    to_end = np.linalg.norm(points - target, axis=1)
    if to_end[start] == 0:
        logger.warning("latent walk endpoints coincide (%d, %d); returning a zero profile", start, end)
        return WalkProfile(
            path=[end],
            sequences=model.decode_sequences(points[[end]]),
            delta_fitness=np.zeros(1),
            delta_sequence=np.zeros(1, dtype=np.int64),
        )

    path = [start]
    while len(path) < n_steps - 1:
        current = path[-1]
        closer = np.flatnonzero((to_end < to_end[current]) & (to_end > 0))
        if closer.size == 0:
            break
        hops = np.linalg.norm(points[closer] - points[current], axis=1)
        path.append(int(closer[np.argmin(hops)]))
    path.append(end)

    decoded = model.decode_sequences(points[path])
    delta_fitness = np.abs(fitness[path] - fitness[end])
    delta_sequence = np.array([hamming(s, decoded[-1]) for s in decoded], dtype=np.int64)
    return WalkProfile(path=path, sequences=decoded, delta_fitness=delta_fitness, delta_sequence=delta_sequence)


def sample_walks(model, points, fitness, n_walks=100, n_steps=10, rng=None):
    """Walk profiles from random starts to the encoded point farthest from each start"""
    model = _as_model(model)
    rng = rng or np.random.default_rng(0)
    points = np.asarray(points, dtype=np.float64)
    starts = rng.choice(len(points), size=n_walks, replace=len(points) < n_walks)
    profiles = []
    for start in starts:
        end = int(np.argmax(np.linalg.norm(points - points[start], axis=1)))
        profiles.append(latent_walk_profile(model, points, fitness, int(start), end, n_steps))
    return profiles


def walk_table(profiles, representation="latent"):
    """Mean gaps per step index across walks"""
    longest = max(len(p.path) for p in profiles)
    rows = []
    for step in range(longest):
        members = [p for p in profiles if len(p.path) > step]
        rows.append(
            {
                "representation": representation,
                "step": step,
                "delta_fitness": float(np.mean([p.delta_fitness[step] for p in members])),
                "delta_sequence": float(np.mean([p.delta_sequence[step] for p in members])),
            }
        )
    return rows


def mean_step_change(profiles):
    """Mean Hamming change of the decoded sequence between consecutive walk steps"""
    changes = [
        np.mean([hamming(a, b) for a, b in zip(p.sequences, p.sequences[1:])]) for p in profiles if len(p.path) > 1
    ]
    return float(np.mean(changes)) if changes else 0.0

# eventgraph.py - Sound-event co-occurrence graph and its Laplacian penalty
# Nodes are event classes, edge weights count how often two classes share a
# clip (or a frame), normalized by the global maximum count.
import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from pipeline.errors import DimensionError, EmptyCorpus, FormatError, InvalidAdjacency, MissingInput, UnknownEvent


@dataclass(frozen=True)
class EventVocabulary:
    labels: tuple

    def __post_init__(self):
        labels = tuple(self.labels)
        if not labels:
            raise EmptyCorpus("vocabulary needs at least one event class")
        if len(set(labels)) != len(labels):
            raise FormatError("vocabulary labels must be unique")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def index(self, label):
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownEvent(label)


@dataclass(frozen=True)
class CooccurrenceGraph:
    labels: tuple
    adjacency: np.ndarray
    degree: np.ndarray
    laplacian: np.ndarray
    raw_counts: np.ndarray = None  # absent for graphs imported from CSV

    @property
    def n_events(self):
        return len(self.labels)


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Graph algebra
# ---------------------------------------------------------------------------

def _check_adjacency(A, atol=1e-12):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidAdjacency(f"adjacency must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidAdjacency("adjacency has non-finite entries")
    if np.any(A < 0):
        raise InvalidAdjacency("adjacency has negative weights")
    if not np.allclose(A, A.T, rtol=0.0, atol=atol):
        raise InvalidAdjacency("adjacency is not symmetric")
    if np.any(np.diag(A) != 0):
        raise InvalidAdjacency("adjacency must have a zero diagonal")
    return A


def degree(A):
    return np.diag(np.asarray(A, dtype=np.float64).sum(axis=1))


def laplacian(A):
    """L = Delta - A with Delta_ii = sum_j A_ij."""
    A = _check_adjacency(A)
    return degree(A) - A


def _check_vector(v, L):
    v = np.asarray(v, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if v.ndim != 1 or L.shape != (v.size, v.size):
        raise DimensionError(f"node weights of length {v.size} do not match Laplacian {L.shape}")
    return v, L


def quadratic_penalty(v, L):
    """v^T L v, which equals 1/2 sum_ij A_ij (v_i - v_j)^2."""
    v, L = _check_vector(v, L)
    return float(v @ L @ v)


def penalty_gradient(v, L):
    v, L = _check_vector(v, L)
    return 2.0 * (L @ v)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def graph_from_counts(raw_counts, vocab):
    raw = np.asarray(raw_counts, dtype=np.int64)
    M = len(vocab)
    if raw.shape != (M, M):
        raise DimensionError(f"count matrix {raw.shape} does not match {M} labels")
    peak = raw.max() if raw.size else 0
    A = raw / float(peak) if peak > 0 else np.zeros((M, M))
    L = laplacian(A)
    return CooccurrenceGraph(
        labels=vocab.labels,
        adjacency=_frozen(A),
        degree=_frozen(degree(A)),
        laplacian=_frozen(L),
        raw_counts=_frozen(raw),
    )


def build_cooccurrence(clips, vocab):
    """Clip-level co-occurrence: count clips in which both classes occur."""
    clips = list(clips)
    if not clips:
        raise EmptyCorpus("no clips to count co-occurrences over")
    presence = np.zeros((len(clips), len(vocab)), dtype=np.int64)
    for k, labels in enumerate(clips):
        for label in labels:
            presence[k, vocab.index(label)] = 1
    raw = presence.T @ presence
    np.fill_diagonal(raw, 0)
    return graph_from_counts(raw, vocab)


def build_cooccurrence_frames(rolls, vocab):
    """Frame-level variant: count frames in which both classes are active."""
    rolls = list(rolls)
    if not rolls:
        raise EmptyCorpus("no event rolls to count co-occurrences over")
    M = len(vocab)
    raw = np.zeros((M, M), dtype=np.int64)
    for Z in rolls:
        Z = np.asarray(Z, dtype=np.int64)
        if Z.shape[0] != M:
            raise DimensionError(f"roll has {Z.shape[0]} classes, vocabulary has {M}")
        raw += Z @ Z.T
    np.fill_diagonal(raw, 0)
    return graph_from_counts(raw, vocab)


def check_graph(graph, tol=1e-12):
    """Raise InvalidAdjacency unless every graph invariant holds."""
    A = _check_adjacency(graph.adjacency)
    if np.any(A > 1.0):
        raise InvalidAdjacency("adjacency weights must lie in [0, 1]")
    if not np.allclose(graph.degree, degree(A), rtol=0.0, atol=tol):
        raise InvalidAdjacency("degree matrix does not match adjacency row sums")
    if not np.allclose(graph.laplacian, graph.degree - A, rtol=0.0, atol=tol):
        raise InvalidAdjacency("laplacian is not degree - adjacency")
    if np.max(np.abs(graph.laplacian.sum(axis=1)), initial=0.0) > tol * max(1, len(A)):
        raise InvalidAdjacency("laplacian rows do not sum to zero")
    if len(A) and np.linalg.eigvalsh(graph.laplacian).min() < -1e-9:
        raise InvalidAdjacency("laplacian is not positive semidefinite")
    return graph


# ---------------------------------------------------------------------------
# Import / export
# ---------------------------------------------------------------------------

def save_graph_json(path, graph):
    payload = {
        "labels": list(graph.labels),
        "raw_counts": graph.raw_counts.tolist() if graph.raw_counts is not None else None,
        "adjacency": graph.adjacency.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2)


def _graph_from_adjacency(labels, A, raw_counts=None):
    vocab = EventVocabulary(tuple(labels))
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (len(vocab), len(vocab)):
        raise FormatError(f"adjacency {A.shape} does not match {len(vocab)} labels")
    L = laplacian(A)
    return CooccurrenceGraph(
        labels=vocab.labels,
        adjacency=_frozen(A),
        degree=_frozen(degree(A)),
        laplacian=_frozen(L),
        raw_counts=_frozen(np.asarray(raw_counts, dtype=np.int64)) if raw_counts is not None else None,
    )


def load_graph_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise MissingInput(path, "graph", e.strerror or e)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: not a graph JSON file ({e})")
    if not isinstance(data, dict):
        raise FormatError(f"{path}: graph JSON must be an object")
    try:
        return _graph_from_adjacency(data["labels"], data["adjacency"], data.get("raw_counts"))
    except KeyError as e:
        raise FormatError(f"{path}: missing key {e}")
    except (TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed graph ({e})")


def save_graph_csv(path, graph):
    pd.DataFrame(graph.adjacency, columns=list(graph.labels)).to_csv(path, index=False)


def load_graph_csv(path):
    try:
        df = pd.read_csv(path)
        A = df.to_numpy(dtype=np.float64)
    except OSError as e:
        raise MissingInput(path, "graph", e.strerror or e)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError, ValueError) as e:
        raise FormatError(f"{path}: not a graph CSV file ({e})")
    return _graph_from_adjacency(list(df.columns), A)

import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from mdsgnn.numerics import SparseMatrix

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


class StreamTag(IntEnum):
    """
    Purpose tags mixed into the seed so every random choice has its own stream.
    """

    FEATURE_MASK = 1
    EDGE_DROP = 2
    PARAM_INIT = 3
    TRAINING = 4
    SYNTHETIC = 5
    SPLIT = 6


def seeded_rng(seed: int, tag: StreamTag) -> np.random.Generator:
    return np.random.default_rng([seed, int(tag)])


class DatasetError(ValueError):
    """
    Raised when a dataset directory is malformed.

    :param message: Description of the problem.
    :type message: str
    :param path: File the problem was found in.
    :type path: Path, optional
    :param line: 1-based line number, if the problem is tied to a line.
    :type line: int, optional
    """

    def __init__(self, message: str, path: Path | None = None, line: int | None = None):
        self.path = path
        self.line = line
        self.message = message
        location = ""
        if path is not None:
            location = f"{path.name}:{line}: " if line is not None else f"{path.name}: "
        super().__init__(f"{location}{message}")


@dataclass
class Graph:
    """
    Undirected attributed graph with labels and a train/val/test split.

    :param features: Feature matrix of shape n×f.
    :type features: np.ndarray
    :param labels: Integer class of every node.
    :type labels: np.ndarray
    :param num_classes: Class count c.
    :type num_classes: int
    :param adjacency: Symmetric binary adjacency without self-loops.
    :type adjacency: SparseMatrix
    :param train_idx: Training node indices.
    :param val_idx: Validation node indices.
    :param test_idx: Test node indices.
    :param name: Dataset name used in metrics records.
    :type name: str
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    adjacency: SparseMatrix
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    name: str = "graph"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.val_idx = np.asarray(self.val_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)

        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValueError("features should be a matrix")
        if self.labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got {self.labels.shape[0]}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels should be in [0, {self.num_classes})")
        if self.adjacency.rows != n or not self.adjacency.symmetric:
            raise ValueError("adjacency should be a symmetric n×n matrix")
        if self.adjacency.csr.diagonal().any():
            raise ValueError("adjacency should not store self-loops")

        seen: set[int] = set()
        for split_name, split in zip(SPLIT_NAMES, self.splits()):
            if len(split) and (split.min() < 0 or split.max() >= n):
                raise ValueError(f"{split_name} split has indices outside [0, {n})")
            members = set(split.tolist())
            if len(members) != len(split) or members & seen:
                raise ValueError(f"{split_name} split overlaps or repeats nodes")
            seen |= members

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def f(self) -> int:
        return self.features.shape[1]

    @property
    def c(self) -> int:
        return self.num_classes

    @property
    def num_edges(self) -> int:
        return self.adjacency.nnz // 2

    @property
    def num_directed_edges(self) -> int:
        return self.adjacency.nnz

    def splits(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.train_idx, self.val_idx, self.test_idx

    def neighbors(self, i: int) -> np.ndarray:
        return self.adjacency.row(i)

    def edge_pairs(self) -> np.ndarray:
        """
        Undirected edges as ``(u, v)`` rows with ``u < v``, in lexicographic order.
        """
        targets, sources = self.adjacency.edge_index()
        upper = targets < sources
        return np.stack([targets[upper], sources[upper]], axis=1)

    def with_edges(self, pairs: np.ndarray) -> "Graph":
        return Graph(
            features=self.features,
            labels=self.labels,
            num_classes=self.num_classes,
            adjacency=SparseMatrix.from_edges(self.n, pairs),
            train_idx=self.train_idx,
            val_idx=self.val_idx,
            test_idx=self.test_idx,
            name=self.name,
        )

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(
            features=features,
            labels=self.labels,
            num_classes=self.num_classes,
            adjacency=self.adjacency,
            train_idx=self.train_idx,
            val_idx=self.val_idx,
            test_idx=self.test_idx,
            name=self.name,
        )


@dataclass
class MaskMatrix:
    """
    Per-node known/missing indicator; the compressed form of a mask whose rows are
    all ones or all zeros.

    :param known: ``True`` where the node's features are known.
    :type known: np.ndarray
    """

    known: np.ndarray

    def __post_init__(self):
        self.known = np.asarray(self.known, dtype=bool)

    @classmethod
    def all_known(cls, n: int) -> "MaskMatrix":
        return cls(known=np.ones(n, dtype=bool))

    @property
    def known_idx(self) -> np.ndarray:
        return np.flatnonzero(self.known)

    @property
    def missing_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.known)

    @property
    def num_known(self) -> int:
        return int(self.known.sum())

    @property
    def num_missing(self) -> int:
        return int((~self.known).sum())


@dataclass
class IncompleteGraph:
    """
    Graph whose features are already masked (missing rows are zero) and whose
    adjacency is the observed one.

    :param graph: The observed graph.
    :type graph: Graph
    :param mask: Which nodes have known features.
    :type mask: MaskMatrix
    """

    graph: Graph
    mask: MaskMatrix = field(default=None)

    def __post_init__(self):
        if self.mask is None:
            self.mask = MaskMatrix.all_known(self.graph.n)
        if self.mask.known.shape != (self.graph.n,):
            raise ValueError(f"mask should cover {self.graph.n} nodes")
        missing = self.mask.missing_idx
        if len(missing) and np.any(self.graph.features[missing] != 0):
            raise ValueError("rows of nodes with missing features should be zero")

    @property
    def n(self) -> int:
        return self.graph.n


def apply_feature_mask(g: Graph, rate: float, seed: int) -> IncompleteGraph:
    """
    Remove the whole feature row of ``floor(rate * n)`` nodes drawn uniformly
    without replacement.
    """
    if not 0 <= rate <= 1:
        raise ValueError(f"rate should be in [0, 1], got {rate}")
    count = math.floor(rate * g.n)
    rng = seeded_rng(seed, StreamTag.FEATURE_MASK)
    chosen = rng.choice(g.n, size=count, replace=False)

    known = np.ones(g.n, dtype=bool)
    known[chosen] = False
    features = g.features.copy()
    features[chosen] = 0.0
    logger.debug("masked %s of %s feature rows (seed %s)", count, g.n, seed)
    return IncompleteGraph(graph=g.with_features(features), mask=MaskMatrix(known=known))


def drop_edges(g: Graph, rate: float, seed: int) -> Graph:
    """
    Remove ``floor(rate * |E|)`` undirected edges, both directions at once.
    """
    if not 0 <= rate <= 1:
        raise ValueError(f"rate should be in [0, 1], got {rate}")
    pairs = g.edge_pairs()
    count = math.floor(rate * len(pairs))
    rng = seeded_rng(seed, StreamTag.EDGE_DROP)
    dropped = rng.choice(len(pairs), size=count, replace=False)
    kept = np.delete(pairs, dropped, axis=0)
    logger.debug("dropped %s of %s edges (seed %s)", count, len(pairs), seed)
    return g.with_edges(kept)


def corrupt(g: Graph, feature_missing: float, edge_missing: float, seed: int) -> IncompleteGraph:
    return apply_feature_mask(drop_edges(g, edge_missing, seed), feature_missing, seed)


def random_class_split(
    labels: np.ndarray,
    num_classes: int,
    train_per_class: int,
    val_per_class: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Draw ``train_per_class`` training and ``val_per_class`` validation nodes from
    every class; everything else is test.
    """
    rng = seeded_rng(seed, StreamTag.SPLIT)
    train, val = [], []
    for cls in range(num_classes):
        members = rng.permutation(np.flatnonzero(labels == cls))
        if len(members) < train_per_class + val_per_class:
            raise ValueError(
                f"class {cls} has {len(members)} nodes, "
                f"needs {train_per_class + val_per_class} for the split"
            )
        train.append(members[:train_per_class])
        val.append(members[train_per_class : train_per_class + val_per_class])
    train_idx = np.sort(np.concatenate(train))
    val_idx = np.sort(np.concatenate(val))
    taken = np.zeros(len(labels), dtype=bool)
    taken[train_idx] = True
    taken[val_idx] = True
    return train_idx, val_idx, np.flatnonzero(~taken)


def make_sbm_graph(
    n: int = 300,
    num_classes: int = 3,
    p_in: float = 0.1,
    p_out: float = 0.01,
    f: int = 50,
    seed: int = 0,
    on_prob: float = 0.3,
    off_prob: float = 0.03,
    train_per_class: int = 20,
    val_per_class: int = 30,
) -> Graph:
    """
    Stochastic block model with class-correlated binary features.

    Nodes are assigned to classes round-robin. Each class owns an equal block of
    feature columns, switched on with ``on_prob`` for its members and ``off_prob``
    for everyone else.
    """
    rng = seeded_rng(seed, StreamTag.SYNTHETIC)
    labels = np.arange(n) % num_classes

    same = labels[:, None] == labels[None, :]
    probs = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n, n)) < probs, k=1)
    pairs = np.argwhere(upper)

    block = np.arange(f) * num_classes // f
    owns = block[None, :] == labels[:, None]
    features = (rng.random((n, f)) < np.where(owns, on_prob, off_prob)).astype(np.float64)

    train_idx, val_idx, test_idx = random_class_split(
        labels, num_classes, train_per_class, val_per_class, seed
    )
    return Graph(
        features=features,
        labels=labels,
        num_classes=num_classes,
        adjacency=SparseMatrix.from_edges(n, pairs),
        train_idx=train_idx,
        val_idx=val_idx,
        test_idx=test_idx,
        name="sbm",
    )


def _data_lines(path: Path) -> list[tuple[int, str]]:
    if not path.exists():
        raise DatasetError("missing file", path=path)
    lines = []
    with open(path, encoding="utf-8") as source:
        for number, line in enumerate(source, start=1):
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                lines.append((number, stripped))
    return lines


def _read_meta(path: Path) -> dict[str, int]:
    meta: dict[str, int] = {}
    for number, line in _data_lines(path):
        key, sep, value = line.partition("=")
        if not sep or key.strip() not in ("n", "f", "c"):
            raise DatasetError(f"unexpected line {line!r}", path=path, line=number)
        try:
            meta[key.strip()] = int(value)
        except ValueError:
            raise DatasetError(f"not an integer: {value!r}", path=path, line=number)
    for key in ("n", "f", "c"):
        if key not in meta:
            raise DatasetError(f"missing {key}=", path=path)
    return meta


def _read_index_file(path: Path, n: int) -> np.ndarray:
    values = []
    for number, line in _data_lines(path):
        try:
            index = int(line)
        except ValueError:
            raise DatasetError(f"not an integer: {line!r}", path=path, line=number)
        if not 0 <= index < n:
            raise DatasetError(f"index out of range: {index}", path=path, line=number)
        values.append(index)
    return np.array(values, dtype=np.int64)


def _read_edges(path: Path, n: int) -> np.ndarray:
    pairs = []
    seen: set[tuple[int, int]] = set()
    for number, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError("expected two tab-separated indices", path=path, line=number)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise DatasetError(f"not an integer pair: {line!r}", path=path, line=number)
        if not (0 <= u < n and 0 <= v < n):
            raise DatasetError(f"index out of range: ({u}, {v})", path=path, line=number)
        if u >= v:
            raise DatasetError(
                f"asymmetric edge list: expected u < v, got ({u}, {v})", path=path, line=number
            )
        if (u, v) in seen:
            raise DatasetError(f"duplicate edge ({u}, {v})", path=path, line=number)
        seen.add((u, v))
        pairs.append((u, v))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _read_features(path: Path, n: int, f: int) -> np.ndarray:
    lines = _data_lines(path)
    if len(lines) != n:
        raise DatasetError(f"expected {n} rows, got {len(lines)}", path=path)
    features = np.zeros((n, f), dtype=np.float64)
    for row, (number, line) in enumerate(lines):
        parts = line.split("\t")
        if len(parts) != f:
            raise DatasetError(f"expected {f} values, got {len(parts)}", path=path, line=number)
        try:
            features[row] = np.array(parts, dtype=np.float64)
        except ValueError:
            raise DatasetError("not a decimal float row", path=path, line=number)
    return features


def _read_labels(path: Path, n: int, c: int) -> np.ndarray:
    lines = _data_lines(path)
    if len(lines) != n:
        raise DatasetError(f"expected {n} labels, got {len(lines)}", path=path)
    labels = np.zeros(n, dtype=np.int64)
    for row, (number, line) in enumerate(lines):
        try:
            label = int(line)
        except ValueError:
            raise DatasetError(f"not an integer: {line!r}", path=path, line=number)
        if not 0 <= label < c:
            raise DatasetError(f"label out of range: {label}", path=path, line=number)
        labels[row] = label
    return labels


def _read_mask(path: Path, n: int) -> MaskMatrix:
    if not path.exists():
        return MaskMatrix.all_known(n)
    lines = _data_lines(path)
    if len(lines) != n:
        raise DatasetError(f"expected {n} rows, got {len(lines)}", path=path)
    known = np.zeros(n, dtype=bool)
    for row, (number, line) in enumerate(lines):
        if line not in ("0", "1"):
            raise DatasetError(f"expected 0 or 1, got {line!r}", path=path, line=number)
        known[row] = line == "1"
    return MaskMatrix(known=known)


def load_dataset(directory: str | Path) -> Graph:
    """
    Read a dataset directory.

    Expected files: ``meta.txt`` (``n=``, ``f=``, ``c=`` lines), ``edges.tsv``
    (``u<TAB>v`` with ``u < v``), ``features.tsv``, ``labels.tsv`` and
    ``train.idx`` / ``val.idx`` / ``test.idx``. Lines starting with ``#`` are
    ignored everywhere.

    :raises DatasetError: With file and line of the first problem found.
    """
    directory = Path(directory)
    meta = _read_meta(directory / "meta.txt")
    n, f, c = meta["n"], meta["f"], meta["c"]
    pairs = _read_edges(directory / "edges.tsv", n)
    features = _read_features(directory / "features.tsv", n, f)
    labels = _read_labels(directory / "labels.tsv", n, c)
    splits = [_read_index_file(directory / f"{name}.idx", n) for name in SPLIT_NAMES]

    try:
        graph = Graph(
            features=features,
            labels=labels,
            num_classes=c,
            adjacency=SparseMatrix.from_edges(n, pairs),
            train_idx=splits[0],
            val_idx=splits[1],
            test_idx=splits[2],
            name=directory.name,
        )
    except ValueError as exc:
        raise DatasetError(str(exc), path=directory) from exc
    logger.info(
        "loaded %s: n=%s, %s undirected edges (%s directed entries), f=%s, c=%s",
        graph.name,
        graph.n,
        graph.num_edges,
        graph.num_directed_edges,
        graph.f,
        graph.c,
    )
    return graph


def load_incomplete_dataset(directory: str | Path) -> IncompleteGraph:
    directory = Path(directory)
    graph = load_dataset(directory)
    mask = _read_mask(directory / "mask.tsv", graph.n)
    try:
        return IncompleteGraph(graph=graph, mask=mask)
    except ValueError as exc:
        raise DatasetError(str(exc), path=directory / "mask.tsv") from exc


def _format_float(value: float) -> str:
    return repr(float(value))


def save_dataset(g: IncompleteGraph | Graph, directory: str | Path, provenance: str | None = None):
    """
    Write ``g`` in the directory format read by :func:`load_dataset`.

    Floats are written in shortest round-trip form, so loading reproduces the
    features bit-exactly. ``mask.tsv`` is written for incomplete graphs only.

    :param provenance: Optional comment placed at the top of ``meta.txt``.
    :raises OSError: If the directory cannot be written.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    graph = g.graph if isinstance(g, IncompleteGraph) else g

    header = f"# {provenance}\n" if provenance else ""
    (directory / "meta.txt").write_text(
        f"{header}n={graph.n}\nf={graph.f}\nc={graph.c}\n", encoding="utf-8"
    )
    (directory / "edges.tsv").write_text(
        "".join(f"{u}\t{v}\n" for u, v in graph.edge_pairs()), encoding="utf-8"
    )
    (directory / "features.tsv").write_text(
        "".join("\t".join(_format_float(x) for x in row) + "\n" for row in graph.features),
        encoding="utf-8",
    )
    (directory / "labels.tsv").write_text(
        "".join(f"{label}\n" for label in graph.labels), encoding="utf-8"
    )
    for name, split in zip(SPLIT_NAMES, graph.splits()):
        (directory / f"{name}.idx").write_text(
            "".join(f"{i}\n" for i in split), encoding="utf-8"
        )
    if isinstance(g, IncompleteGraph):
        (directory / "mask.tsv").write_text(
            "".join("1\n" if known else "0\n" for known in g.mask.known), encoding="utf-8"
        )

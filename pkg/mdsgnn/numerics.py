import logging
import struct
from collections.abc import Callable, Iterable, Mapping, Sequence
from contextvars import ContextVar
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import special

logger = logging.getLogger(__name__)

BackwardFunc = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """
    Raised when a loss or a finite-difference evaluation produces a non-finite value,
    or when a gradient check exceeds its tolerance.

    :param message: Human readable description.
    :type message: str
    :param component: Name of the loss component or check that failed.
    :type component: str
    :param epoch: Training epoch at which the failure happened, if any.
    :type epoch: int, optional
    """

    def __init__(self, message: str, component: str, epoch: int | None = None):
        super().__init__(message)
        self.component = component
        self.epoch = epoch


class Tensor:
    """
    Dense float64 matrix that may take part in a recorded computation.

    Scalars are stored as 1×1 matrices and vectors as 1×n rows, so every tensor
    is two-dimensional.

    :ivar data: Row-major values.
    :ivar requires_grad: Whether backward should produce a gradient for it.
    :ivar grad: Gradient written by the last backward pass, if any.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(
        self,
        data: np.ndarray | Sequence | float,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        array = np.asarray(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise ShapeError(f"Tensor must be at most 2-dimensional, got {array.ndim}")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: "Tape | None" = None

    @classmethod
    def parameter(cls, data: np.ndarray, name: str | None = None) -> "Tensor":
        return cls(np.array(data, dtype=np.float64), requires_grad=True, name=name)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}{self.shape} requires_grad={self.requires_grad}"


@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFunc


_active_tape: ContextVar["Tape | None"] = ContextVar("mdsgnn_tape", default=None)


class Tape:
    """
    Ordered record of the operations executed while the tape is active.

    Usage::

        with Tape() as tape:
            loss = ...
        grads = tape.backward(loss, params)

    Operations run outside an active tape compute values only.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self):
        return len(self.entries)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFunc):
        output._tape = self
        self.entries.append(TapeEntry(output=output, inputs=inputs, backward=backward))

    def backward(
        self, loss: Tensor, params: Iterable[Tensor] = ()
    ) -> dict[Tensor, np.ndarray]:
        """
        Propagate d(loss)/d(.) through the recorded entries in reverse order.

        :param loss: Scalar tensor recorded on this tape.
        :type loss: Tensor
        :param params: Tensors to report gradients for. Each one also gets its
            ``grad`` attribute set; parameters the loss does not depend on get zeros.
        :type params: Iterable[Tensor]
        :return: Mapping from parameter to gradient array.
        :rtype: dict[Tensor, np.ndarray]
        """
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for entry in reversed(self.entries):
            grad_out = grads.pop(id(entry.output), None)
            if grad_out is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backward(grad_out)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        result = {}
        for param in params:
            grad = grads.get(id(param))
            if grad is None:
                grad = np.zeros_like(param.data)
            param.grad = grad
            result[param] = grad
        return result


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    if loss._tape is None:
        raise ShapeError("loss was not produced by tracked operations")
    return loss._tape.backward(loss, params)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], back: BackwardFunc) -> Tensor:
    tape = _active_tape.get()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        tape.record(out, inputs, back)
    return out


def _require(condition: bool, message: str):
    if not condition:
        raise ShapeError(message)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    _require(
        b.rows in (a.rows, 1) and b.cols in (a.cols, 1),
        f"{op}: cannot combine shapes {a.shape} and {b.shape}",
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


@dataclass(frozen=True)
class SparseMatrix:
    """
    Compressed sparse row matrix used for adjacency structures.

    Column indices are kept sorted within each row. When ``symmetric`` is set the
    matrix is square and equal to its transpose.

    :param csr: Backing scipy CSR matrix.
    :type csr: scipy.sparse.csr_matrix
    :param symmetric: Whether the matrix is flagged symmetric.
    :type symmetric: bool
    """

    csr: sp.csr_matrix
    symmetric: bool = False

    def __post_init__(self):
        if not self.csr.has_sorted_indices:
            self.csr.sort_indices()
        if self.symmetric:
            if self.csr.shape[0] != self.csr.shape[1]:
                raise ShapeError(f"symmetric matrix must be square, got {self.csr.shape}")
            if (self.csr != self.csr.T).nnz != 0:
                raise ValueError("matrix flagged symmetric is not symmetric")

    @classmethod
    def from_edges(cls, n: int, pairs: np.ndarray) -> "SparseMatrix":
        """
        Build a symmetric binary matrix from undirected ``(u, v)`` pairs.
        """
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        values = np.ones(len(rows), dtype=np.float64)
        matrix = sp.csr_matrix((values, (rows, cols)), shape=(n, n))
        matrix.sum_duplicates()
        matrix.data[:] = 1.0
        return cls(csr=matrix, symmetric=True)

    @classmethod
    def from_dense(cls, dense: np.ndarray, symmetric: bool = False) -> "SparseMatrix":
        return cls(csr=sp.csr_matrix(np.asarray(dense, dtype=np.float64)), symmetric=symmetric)

    @property
    def rows(self) -> int:
        return self.csr.shape[0]

    @property
    def cols(self) -> int:
        return self.csr.shape[1]

    @property
    def offsets(self) -> np.ndarray:
        return self.csr.indptr

    @property
    def indices(self) -> np.ndarray:
        return self.csr.indices

    @property
    def values(self) -> np.ndarray:
        return self.csr.data

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    def row(self, i: int) -> np.ndarray:
        return self.csr.indices[self.csr.indptr[i] : self.csr.indptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.asarray(self.csr.sum(axis=1)).ravel()

    def with_self_loops(self) -> "SparseMatrix":
        looped = (self.csr + sp.identity(self.rows, format="csr")).tocsr()
        looped.data[:] = 1.0
        return SparseMatrix(csr=looped, symmetric=self.symmetric)

    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        """
        Return ``(targets, sources)`` for every stored entry, grouped by row.
        """
        targets = np.repeat(np.arange(self.rows), np.diff(self.csr.indptr))
        return targets, self.csr.indices.astype(np.int64)

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()


def sym_normalize(a: SparseMatrix) -> SparseMatrix:
    """
    Compute ``D^{-1/2} A D^{-1/2}``. Zero-degree rows stay zero.

    Each value is ``a_ij * (d_i^{-1/2} * d_j^{-1/2})``; the product in brackets is
    commutative, so mirrored entries are bit-identical.
    """
    degrees = a.degrees()
    inv_sqrt = np.zeros_like(degrees)
    positive = degrees > 0
    inv_sqrt[positive] = 1.0 / np.sqrt(degrees[positive])

    coo = a.csr.tocoo()
    values = coo.data * (inv_sqrt[coo.row] * inv_sqrt[coo.col])
    normalized = sp.csr_matrix((values, (coo.row, coo.col)), shape=a.csr.shape)
    return SparseMatrix(csr=normalized, symmetric=a.symmetric)


def self_loop_normalize(a: SparseMatrix) -> SparseMatrix:
    """
    GCN propagation matrix: symmetric normalization of ``A + I``.
    """
    return sym_normalize(a.with_self_loops())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.cols == b.rows, f"matmul: shapes {a.shape} and {b.shape} do not align")

    def back(grad):
        return (
            grad @ b.data.T if a.requires_grad else None,
            a.data.T @ grad if b.requires_grad else None,
        )

    return _result(a.data @ b.data, (a, b), back)


def spmm(s: SparseMatrix, x: Tensor) -> Tensor:
    """
    Sparse-dense product ``S @ X``. The sparse operand is a constant.
    """
    _require(s.cols == x.rows, f"spmm: shapes {s.csr.shape} and {x.shape} do not align")

    def back(grad):
        return (np.asarray(s.csr.T @ grad),)

    return _result(np.asarray(s.csr @ x.data), (x,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def back(grad):
        return grad, _unbroadcast(grad, b.shape)

    return _result(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def back(grad):
        return grad, -_unbroadcast(grad, b.shape)

    return _result(a.data - b.data, (a, b), back)


def scale(x: Tensor, factor: float) -> Tensor:
    def back(grad):
        return (grad * factor,)

    return _result(x.data * factor, (x,), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def back(grad):
        return (
            grad * b.data if a.requires_grad else None,
            _unbroadcast(grad * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), back)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def back(grad):
        return (grad * positive,)

    return _result(np.where(positive, x.data, 0.0), (x,), back)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    slopes = np.where(x.data > 0, 1.0, np.where(x.data < 0, slope, 0.0))

    def back(grad):
        return (grad * slopes,)

    return _result(np.where(x.data > 0, x.data, slope * x.data), (x,), back)


def elu(x: Tensor) -> Tensor:
    negative_part = np.minimum(x.data, 0.0)
    positive = x.data > 0

    def back(grad):
        return (grad * np.where(positive, 1.0, np.exp(negative_part)),)

    return _result(np.where(positive, x.data, np.expm1(negative_part)), (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)

    def back(grad):
        return (grad * out * (1.0 - out),)

    return _result(out, (x,), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def back(grad):
        return (grad * out,)

    return _result(out, (x,), back)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """
    Natural log of ``max(x, floor)``; entries below the floor get no gradient.
    """
    clamped = np.maximum(x.data, floor) if floor > 0 else x.data
    passes = x.data >= floor

    def back(grad):
        return (np.where(passes, grad / clamped, 0.0),)

    return _result(np.log(clamped), (x,), back)


def softmax_rows(x: Tensor) -> Tensor:
    out = special.softmax(x.data, axis=1)

    def back(grad):
        return (out * (grad - (grad * out).sum(axis=1, keepdims=True)),)

    return _result(out, (x,), back)


def log_softmax_rows(x: Tensor) -> Tensor:
    out = special.log_softmax(x.data, axis=1)

    def back(grad):
        return (grad - np.exp(out) * grad.sum(axis=1, keepdims=True),)

    return _result(out, (x,), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """
    Inverted dropout: kept entries are divided by the keep probability.
    Identity when ``train`` is false or ``rate`` is zero.
    """
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        keep = np.zeros(x.shape)
    else:
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def back(grad):
        return (grad * keep,)

    return _result(x.data * keep, (x,), back)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    _require(len(tensors) > 0, "concat_cols: nothing to concatenate")
    rows = tensors[0].rows
    _require(
        all(t.rows == rows for t in tensors),
        f"concat_cols: row counts differ {[t.rows for t in tensors]}",
    )
    bounds = np.cumsum([0] + [t.cols for t in tensors])

    def back(grad):
        return tuple(grad[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _result(np.hstack([t.data for t in tensors]), tuple(tensors), back)


def mean_cols(x: Tensor) -> Tensor:
    """
    Mean of every column, as a 1×cols row.
    """

    def back(grad):
        return (np.broadcast_to(grad / x.rows, x.shape),)

    return _result(x.data.mean(axis=0, keepdims=True), (x,), back)


def row_sum(x: Tensor) -> Tensor:
    def back(grad):
        return (np.broadcast_to(grad, x.shape),)

    return _result(x.data.sum(axis=1, keepdims=True), (x,), back)


def sum_all(x: Tensor) -> Tensor:
    def back(grad):
        return (np.full(x.shape, grad[0, 0]),)

    return _result(np.array([[x.data.sum()]]), (x,), back)


def transpose(x: Tensor) -> Tensor:
    def back(grad):
        return (grad.T,)

    return _result(x.data.T.copy(), (x,), back)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def back(grad):
        full = np.zeros(x.shape)
        np.add.at(full, index, grad)
        return (full,)

    return _result(x.data[index], (x,), back)


def pick(x: Tensor, columns: np.ndarray) -> Tensor:
    """
    Select ``x[i, columns[i]]`` for every row, as a rows×1 column.
    """
    columns = np.asarray(columns, dtype=np.int64)
    _require(len(columns) == x.rows, "pick: one column per row is required")
    rows = np.arange(x.rows)

    def back(grad):
        full = np.zeros(x.shape)
        full[rows, columns] = grad[:, 0]
        return (full,)

    return _result(x.data[rows, columns].reshape(-1, 1), (x,), back)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """
    Scale every row to unit norm. Zero rows stay zero and pass no gradient.
    """
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    nonzero = norms > 0
    safe = np.where(nonzero, norms, 1.0)
    out = np.where(nonzero, x.data / safe, 0.0)

    def back(grad):
        projected = grad - out * (grad * out).sum(axis=1, keepdims=True)
        return (np.where(nonzero, projected / safe, 0.0),)

    return _result(out, (x,), back)


def cosine_similarity_matrix(a: Tensor, b: Tensor | None = None) -> Tensor:
    """
    Pairwise cosine similarity between the rows of ``a`` and the rows of ``b``
    (``a`` with itself when ``b`` is omitted). Zero rows score 0 against everything.
    """
    left = l2_normalize_rows(a)
    right = left if b is None else l2_normalize_rows(b)
    _require(left.cols == right.cols, f"cosine: widths {a.cols} and {right.cols} differ")
    return matmul(left, transpose(right))


def segment_softmax(x: Tensor, segments: np.ndarray, count: int) -> Tensor:
    """
    Softmax of every column of ``x`` taken separately within each group of rows
    that share a segment id.
    """
    segments = np.asarray(segments, dtype=np.int64)
    peaks = np.full((count, x.cols), -np.inf)
    np.maximum.at(peaks, segments, x.data)
    shifted = np.exp(x.data - peaks[segments])
    totals = np.zeros((count, x.cols))
    np.add.at(totals, segments, shifted)
    out = shifted / totals[segments]

    def back(grad):
        weighted = np.zeros((count, x.cols))
        np.add.at(weighted, segments, grad * out)
        return (out * (grad - weighted[segments]),)

    return _result(out, (x,), back)


def segment_sum(x: Tensor, segments: np.ndarray, count: int) -> Tensor:
    segments = np.asarray(segments, dtype=np.int64)
    out = np.zeros((count, x.cols))
    np.add.at(out, segments, x.data)

    def back(grad):
        return (grad[segments],)

    return _result(out, (x,), back)


def bce_with_logits(logits: Tensor, targets: np.ndarray, clamp: float = 30.0) -> Tensor:
    """
    Elementwise ``-[t ln s(x) + (1 - t) ln(1 - s(x))]`` with ``x`` clamped to
    ``[-clamp, clamp]`` first. Clamped entries pass no gradient.
    """
    targets = np.asarray(targets, dtype=np.float64)
    _require(targets.shape == logits.shape, "bce_with_logits: shape mismatch")
    clipped = np.clip(logits.data, -clamp, clamp)
    inside = np.abs(logits.data) <= clamp

    def back(grad):
        return (np.where(inside, grad * (special.expit(clipped) - targets), 0.0),)

    return _result(np.logaddexp(0.0, clipped) - targets * clipped, (logits,), back)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GradCheckReport:
    max_error: float
    coordinates: int
    worst: dict[str, float] = field(default_factory=dict)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """
    Compare tape gradients of ``fn`` with central finite differences.

    ``fn`` is called once under a tape and then twice per sampled coordinate without
    one, so it must be deterministic (dropout and feature replacement disabled).

    :param fn: Zero-argument function returning a scalar tensor.
    :param params: Parameters to check; their ``data`` is perturbed in place and restored.
    :param eps: Finite-difference step.
    :param samples: Number of coordinates checked per parameter; all when omitted.
    :param rng: Generator used to sample coordinates.
    :return: Report whose ``max_error`` is the largest
        ``|analytic - numeric| / max(1, |numeric|)``.
    :raises NumericalError: If any evaluation is non-finite.
    """
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = fn()
    analytic = tape.backward(loss, params)

    report = GradCheckReport(max_error=0.0, coordinates=0)
    for position, param in enumerate(params):
        label = param.name or f"param{position}"
        flat_count = param.data.size
        if samples is None or samples >= flat_count:
            flat = np.arange(flat_count)
        else:
            flat = rng.choice(flat_count, size=samples, replace=False)

        worst = 0.0
        for coordinate in flat:
            index = np.unravel_index(coordinate, param.shape)
            original = param.data[index]
            param.data[index] = original + eps
            upper = fn().item()
            param.data[index] = original - eps
            lower = fn().item()
            param.data[index] = original
            numeric = (upper - lower) / (2 * eps)
            if not (np.isfinite(upper) and np.isfinite(lower)):
                raise NumericalError(
                    f"non-finite value while probing {label}{index}", component=label
                )
            error = abs(analytic[param][index] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, error)
            report.coordinates += 1

        report.worst[label] = worst
        report.max_error = max(report.max_error, worst)

    logger.debug("grad check over %s coordinates: %s", report.coordinates, report.worst)
    return report


_NAME_LEN = struct.Struct("<I")
_RANK = struct.Struct("<I")
_DIM = struct.Struct("<Q")


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray]):
    """
    Write named float64 arrays as consecutive entries of
    ``name length (uint32) | UTF-8 name | rank (uint32) | dims (uint64 each) | data``.
    Everything is little-endian.
    """
    with open(path, "wb") as out:
        for name, array in arrays.items():
            array = np.asarray(array, dtype="<f8")
            encoded = name.encode("utf-8")
            out.write(_NAME_LEN.pack(len(encoded)))
            out.write(encoded)
            out.write(_RANK.pack(array.ndim))
            for dim in array.shape:
                out.write(_DIM.pack(dim))
            out.write(np.ascontiguousarray(array).tobytes())


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    payload = Path(path).read_bytes()
    offset = 0
    while offset < len(payload):
        (name_len,) = _NAME_LEN.unpack_from(payload, offset)
        offset += _NAME_LEN.size
        name = payload[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = _RANK.unpack_from(payload, offset)
        offset += _RANK.size
        dims = []
        for _ in range(rank):
            (dim,) = _DIM.unpack_from(payload, offset)
            dims.append(dim)
            offset += _DIM.size
        count = int(np.prod(dims)) if dims else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise ValueError(f"truncated entry {name!r} in {path}")
        data = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        arrays[name] = data.reshape(dims).astype(np.float64)
        offset += nbytes
    return arrays

"""Dense 2-D tensors with a define-by-run reverse-mode tape.

Every tensor is a float64 matrix.  Operations on tensors that require
gradients append a node to a :class:`Tape`; :func:`backward` sweeps that tape
in reverse and returns the gradient of a scalar loss with respect to every
leaf tensor that took part in the computation.

The tape is rebuilt on each forward pass.  Leaves (parameters) can be reused
across passes; they are re-registered on whichever tape consumes them next.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class EmptyInputError(ValueError):
    """An operation received an empty row set or mask."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got array of rank {arr.ndim}")
    return arr


class Tensor:
    """A real matrix that may participate in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "tape_id", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_matrix(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.tape_id: int | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    tensor: Tensor
    parents: tuple[Tensor, ...] = ()
    backward: Backward | None = None
    # tape positions of the parents when recorded (None if no gradient needed)
    parent_ids: tuple[int | None, ...] = ()


@dataclass
class Tape:
    """Ordered record of operations; operands always precede their results."""

    nodes: list[Node] = field(default_factory=list)
    done: bool = False

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        node.tensor.tape = self
        node.tensor.tape_id = len(self.nodes) - 1
        return node.tensor.tape_id

    def leaves(self) -> list[Tensor]:
        return [n.tensor for n in self.nodes if n.backward is None]

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
        if self.done:
            raise TapeError("backward already ran on this tape; run a fresh forward pass")
        self.done = True
        grads = {loss.tape_id: np.ones((1, 1))}
        for idx in range(loss.tape_id, -1, -1):
            g = grads.get(idx)
            node = self.nodes[idx]
            if g is None or node.backward is None:
                continue
            for pid, pg in zip(node.parent_ids, node.backward(g)):
                if pg is None or pid is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        out = {}
        for idx, node in enumerate(self.nodes):
            if node.backward is None:
                leaf = node.tensor
                g = grads.get(idx)
                if g is None:
                    g = np.zeros_like(leaf.data)
                # a leaf can sit on the tape twice after a merge
                out[leaf] = out[leaf] + g if leaf in out else g
        for leaf, g in out.items():
            leaf.grad = g
        # single use: drop the graph so its arrays are freed without waiting for the cycle collector
        self.nodes = []
        return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss; returns ``{leaf: gradient}``.

    Each leaf's ``grad`` attribute is also set.  Running backward twice on the
    same forward pass raises :class:`TapeError`.
    """
    if loss.tape is None or loss._leaf:
        raise TapeError("backward on a tensor that was not produced by recorded operations")
    return loss.tape.backward(loss)


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], fn: Backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.tape = None
    out.tape_id = None
    out._leaf = False
    live = [p for p in parents if p.requires_grad]
    out.requires_grad = bool(live)
    if not live:
        return out
    tapes = list({id(p.tape): p.tape for p in live if not p._leaf}.values())
    if any(t.done for t in tapes):
        raise TapeError("cannot extend a tape after backward; run a fresh forward pass")
    tape = _merge(tapes) if tapes else Tape()
    for p in live:
        if p._leaf and p.tape is not tape:
            tape._append(Node(p))
    ids = tuple(p.tape_id if p.requires_grad else None for p in parents)
    tape._append(Node(out, tuple(parents), fn, ids))
    return out


def _merge(tapes: list[Tape]) -> Tape:
    """Fold independently started tapes into the longest one."""
    target = max(tapes, key=lambda t: len(t.nodes))
    for t in tapes:
        if t is target:
            continue
        offset = len(target.nodes)
        for node in t.nodes:
            node.parent_ids = tuple(None if i is None else i + offset for i in node.parent_ids)
            if node.tensor.tape is t:
                node.tensor.tape = target
                node.tensor.tape_id += offset
            target.nodes.append(node)
        t.nodes = []
        t.done = True
    return target


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    # sums go through BLAS, which beats numpy's strided reductions on narrow arrays
    if shape[0] == 1 and g.shape[0] != 1:
        g = np.ones((1, g.shape[0])) @ g
    if shape[1] == 1 and g.shape[1] != 1:
        g = g @ np.ones((g.shape[1], 1))
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------------------
# element-wise arithmetic


def add(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def tanh_elem(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp_elem(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    active = a.data > 0
    return _record(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; a no-op when ``p == 0`` or ``rng`` is None."""
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _record(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape and reduction ops


def transpose(a: Tensor) -> Tensor:
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ShapeError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    ca = a.cols
    return _record(np.hstack([a.data, b.data]), (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def take_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.cols:
        raise ShapeError(f"take_cols: [{start}, {stop}) out of range for {a.shape}")
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record(a.data[:, start:stop].copy(), (a,), fn)


def row_mean(a: Tensor) -> Tensor:
    m = a.rows
    if m == 0:
        raise EmptyInputError("row_mean of a tensor with no rows")
    return _record(a.data.mean(axis=0, keepdims=True), (a,),
                   lambda g: (np.repeat(g / m, m, axis=0),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def sum_squares(a: Tensor) -> Tensor:
    d = a.data
    return _record(np.array([[np.sum(d * d)]]), (a,), lambda g: (2.0 * g[0, 0] * d,))


def softmax_rows(a: Tensor, total: float = 1.0) -> Tensor:
    """Row-wise softmax scaled so each row sums to ``total``."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    # dividing by sum/total keeps uniform rows exact (1/N * N is not always 1)
    y = e / (e.sum(axis=1, keepdims=True) / total)

    def fn(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True) / total),)

    return _record(y, (a,), fn)


def softmax_cols(a: Tensor, total: float = 1.0) -> Tensor:
    """Column-wise softmax scaled so each column sums to ``total``."""
    z = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    y = e / (e.sum(axis=0, keepdims=True) / total)

    def fn(g):
        return (y * (g - np.sum(g * y, axis=0, keepdims=True) / total),)

    return _record(y, (a,), fn)


# ---------------------------------------------------------------------------
# products


def matmul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record(ad @ bd, (a, b), fn)


class SparseMatrix:
    """Compressed-sparse-row matrix with sorted, unique column indices per row."""

    __slots__ = ("rows", "cols", "row_offsets", "col_indices", "values", "_csr", "_csr_t")

    def __init__(self, rows: int, cols: int, row_offsets, col_indices, values):
        self.rows = int(rows)
        self.cols = int(cols)
        self.row_offsets = np.asarray(row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(col_indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.row_offsets.shape != (self.rows + 1,):
            raise ShapeError(f"row_offsets must have length rows+1 = {self.rows + 1}")
        if self.row_offsets[0] != 0 or np.any(np.diff(self.row_offsets) < 0):
            raise ValueError("row_offsets must start at 0 and be non-decreasing")
        if self.row_offsets[-1] != len(self.values) or len(self.col_indices) != len(self.values):
            raise ValueError("row_offsets[-1] must equal the number of stored values")
        if len(self.col_indices) and (self.col_indices.min() < 0 or self.col_indices.max() >= self.cols):
            raise ValueError(f"column index out of range for {self.cols} columns")
        self._csr = sp.csr_matrix((self.values, self.col_indices, self.row_offsets),
                                  shape=(self.rows, self.cols))
        self._csr.has_sorted_indices = False
        self._csr.sort_indices()
        self._csr_t = None

    @classmethod
    def from_coo(cls, rows: int, cols: int, r, c, v=None) -> "SparseMatrix":
        """Build from coordinate triplets; duplicates are summed."""
        r = np.asarray(r, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        v = np.ones(len(r)) if v is None else np.asarray(v, dtype=np.float64)
        m = sp.coo_matrix((v, (r, c)), shape=(rows, cols)).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        return cls(rows, cols, m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        a = np.asarray(a, dtype=np.float64)
        r, c = np.nonzero(a)
        return cls.from_coo(a.shape[0], a.shape[1], r, c, a[r, c])

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def transposed(self) -> sp.csc_matrix:
        """The transpose as a CSC view sharing this matrix's arrays."""
        if self._csr_t is None:
            self._csr_t = self._csr.T
        return self._csr_t

    def with_values(self, values) -> "SparseMatrix":
        """Same sparsity pattern, new stored values (no re-validation)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ShapeError(f"expected {self.nnz} values, got {values.shape}")
        out = SparseMatrix.__new__(SparseMatrix)
        out.rows, out.cols = self.rows, self.cols
        out.row_offsets, out.col_indices, out.values = self.row_offsets, self.col_indices, values
        out._csr = sp.csr_matrix((values, self._csr.indices, self._csr.indptr), shape=self.shape)
        out._csr.has_sorted_indices = True
        out._csr_t = None
        return out

    def __repr__(self):
        return f"SparseMatrix({self.rows}x{self.cols}, nnz={self.nnz})"


def spmm(s: SparseMatrix, b) -> Tensor:
    """Sparse-dense product; gradient flows to the dense operand only."""
    b = _tensor(b)
    if s.cols != b.rows:
        raise ShapeError(f"spmm: inner dimensions differ, {s.shape} @ {b.shape}")
    out = np.asarray(s.to_scipy() @ b.data)
    return _record(out, (b,), lambda g: (np.asarray(s.transposed() @ g),))


def sparse_dropout(s: SparseMatrix, p: float, rng: np.random.Generator | None) -> SparseMatrix:
    """Inverted dropout on the stored entries of a constant sparse matrix."""
    if p <= 0.0 or rng is None:
        return s
    keep = (rng.random(s.nnz) >= p) / (1.0 - p)
    return s.with_values(s.values * keep)


# ---------------------------------------------------------------------------
# piecewise-linear max and the loss


def kmax_affine(x: Tensor, alphas: Sequence, betas: Sequence | None = None, scale=None) -> Tensor:
    """Element-wise ``max_k (alpha_k * x + beta_k)``.

    ``alphas`` and ``betas`` hold one tensor per segment, each broadcastable
    to ``x`` (``1 x C`` channel-wise, ``N x 1`` node-wise or ``N x C``).
    Ties go to the smallest segment index, and the gradient follows the
    winning segment only.  ``betas=None`` drops the bias terms.  An optional
    ``N x 1`` ``scale`` multiplies the result row-wise; for a positive scale
    this equals scaling every segment before the max.
    """
    x = _tensor(x)
    alphas = [_tensor(a) for a in alphas]
    K = len(alphas)
    if K < 1:
        raise ValueError("kmax_affine needs at least one segment")
    if betas is not None:
        betas = [_tensor(b) for b in betas]
        if len(betas) != K:
            raise ShapeError(f"kmax_affine: {K} slopes but {len(betas)} biases")
    for t in alphas + (betas or []):
        _check_broadcast(x, t, "kmax_affine")
        if t.rows not in (1, x.rows) or t.cols not in (1, x.cols):
            raise ShapeError(f"kmax_affine: parameter {t.shape} does not fit input {x.shape}")
    xd = x.data
    y, win = None, np.zeros(xd.shape, dtype=np.int16)
    for k in range(K):
        v = alphas[k].data * xd
        if betas is not None:
            v += betas[k].data
        if y is None:
            y = np.broadcast_to(v, xd.shape).copy()
        else:
            # strict comparison keeps ties on the smaller index
            better = v > y
            np.maximum(y, v, out=y)
            np.maximum(win, better * np.int16(k), out=win)
    parents = (x, *alphas, *(betas or []))
    if scale is not None:
        scale = _tensor(scale)
        if scale.shape != (xd.shape[0], 1):
            raise ShapeError(f"kmax_affine: scale {scale.shape} does not fit input {x.shape}")
        parents += (scale,)
        m, y = y, y * scale.data

    def fn(g):
        ds = ()
        if scale is not None:
            ds = ((g * m) @ np.ones((m.shape[1], 1)),)
            g = g * scale.data
        dx = np.zeros_like(xd)
        da, db = [], []
        rest = g
        for k in range(K):
            # masks are disjoint, so the last one is the exact remainder
            gk = rest if k == K - 1 else g * (win == k)
            if k < K - 1:
                rest = rest - gk
            dx += gk * alphas[k].data
            da.append(_unbroadcast(gk * xd, alphas[k].shape))
            if betas is not None:
                db.append(_unbroadcast(gk, betas[k].shape))
        return (dx, *da, *db, *ds)

    out = _record(y, parents, fn)
    return out


def kink_margin(x: np.ndarray, alphas: Sequence[np.ndarray], betas: Sequence[np.ndarray] | None = None) -> float:
    """Smallest gap between the winning and runner-up segment over all elements."""
    if len(alphas) < 2:
        return np.inf
    vals = np.stack([np.broadcast_to(a * x + (0.0 if betas is None else b), x.shape)
                     for a, b in zip(alphas, betas or [None] * len(alphas))])
    vals.sort(axis=0)
    return float(np.min(vals[-1] - vals[-2]))


def nll_loss(logits: Tensor, labels, mask) -> Tensor:
    """Mean negative log-softmax likelihood over the masked nodes."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise EmptyInputError("nll_loss over an empty mask")
    z = logits.data[mask]
    y = labels[mask]
    if y.max() >= logits.cols or y.min() < 0:
        raise ValueError(f"label out of range for {logits.cols} classes")
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    m = len(mask)
    rows = np.arange(m)
    loss = np.mean(lse - z[rows, y])
    shape = logits.shape

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1.0
        full = np.zeros(shape)
        np.add.at(full, mask, p * (g[0, 0] / m))
        return (full,)

    return _record(np.array([[loss]]), (logits,), fn)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` maps a tensor to a 1x1 tensor and must be deterministic.  Relative
    error uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    grads = backward(f(leaf))
    analytic = grads[leaf]
    numeric = np.empty_like(x0)
    for idx in np.ndindex(*x0.shape):
        xp = x0.copy()
        xp[idx] += eps
        xm = x0.copy()
        xm[idx] -= eps
        numeric[idx] = (f(Tensor(xp)).data[0, 0] - f(Tensor(xm)).data[0, 0]) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """:func:`finite_diff_check` over several leaves of a closure at once.

    Each parameter's ``data`` is perturbed in place and restored.
    """
    grads = backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.data))
        base = p.data
        numeric = np.empty_like(base)
        for idx in np.ndindex(*base.shape):
            pert = base.copy()
            pert[idx] = base[idx] + eps
            p.data = pert
            up = loss_fn().data[0, 0]
            pert[idx] = base[idx] - eps
            down = loss_fn().data[0, 0]
            numeric[idx] = (up - down) / (2 * eps)
        p.data = base
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst

"""ReLU DNNs, basic RNNs, and stacked (deep) RNNs with exact evaluation.

Networks are plain weight-matrix stacks: y = W_d phi(W_{d-1} ... phi(W_0 x))
with phi = entrywise max(., 0) and no activation after the last matrix.
Biases are emulated by an optional constant input slot: when set, the
evaluator appends a trailing 1.0 to the input of the underlying DNN.

A basic RNN is a DNN with input (x_i, y_{i-1}) and output y_i, started from
y_0 = 0.  A deep RNN is a stack of basic RNNs; a stage wired `init_with_last`
receives, besides the previous stage's output sequence, a second channel
block that carries the previous stage's final output at position 1 and zeros
afterwards.

Matrices are stored in CSR form (the constructed networks are deep and very
sparse); `mats[j]` is a scipy.sparse.csr_matrix and `ids[j]` a structurally
identical matrix whose data entries are integer parameter ids.  Entries
sharing an id may differ by the fixed sign/scale tag implicit in their float
values; the independent-weight count is the number of distinct nonzero ids,
which stays fixed when a construction is repeated or unrolled.

Evaluation runs through numba kernels that accumulate matrix rows in
ascending column order, so repeated evaluations, unrolled evaluations, and
oracle replicas of the same arithmetic agree bitwise.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from .errors import ValidationError

_param_counter = itertools.count(start=1)


def _to_csr(x):
    if sp.issparse(x):
        m = x.tocsr().astype(np.float64)
    else:
        m = sp.csr_matrix(np.asarray(x, dtype=np.float64))
    m.sort_indices()
    return m


def _ids_like(w, dense_ids=None):
    """Id matrix sharing w's sparsity structure (ids stored as float data)."""
    if dense_ids is None:
        data = np.array([float(next(_param_counter)) for _ in range(w.nnz)])
    else:
        dense_ids = np.asarray(dense_ids)
        rows, cols = w.nonzero()
        data = dense_ids[rows, cols].astype(np.float64)
    return sp.csr_matrix((data, w.indices.copy(), w.indptr.copy()), shape=w.shape)


def fresh_ids(w):
    return _ids_like(_to_csr(w))


@dataclass(frozen=True)
class WeightBudget:
    total_weights: int
    independent_weights: int


@dataclass(frozen=True, eq=False)
class Dnn:
    """Weight-matrix stack.  `mats[j]` has shape (s_{j+1}, s_j)."""

    mats: tuple
    ids: tuple
    constant_input_slot: bool = False
    _prog: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        prev = None
        for w, pid in zip(self.mats, self.ids):
            if w.shape != pid.shape:
                raise ValidationError("weight/id shape mismatch")
            if prev is not None and w.shape[1] != prev:
                raise ValidationError(
                    f"layer dimensions do not chain: {w.shape[1]} vs {prev}"
                )
            prev = w.shape[0]

    @property
    def depth(self):
        return len(self.mats) - 1

    @property
    def width(self):
        return max(max(w.shape) for w in self.mats)

    @property
    def input_size(self):
        return self.mats[0].shape[1] - (1 if self.constant_input_slot else 0)

    @property
    def output_size(self):
        return self.mats[-1].shape[0]

    def dense(self, j):
        return self.mats[j].toarray()

    def dense_ids(self, j):
        return self.ids[j].astype(np.int64).toarray()

    def budget(self):
        total = sum(w.shape[0] * w.shape[1] for w in self.mats)
        distinct = set()
        for pid in self.ids:
            distinct.update(np.unique(pid.data.astype(np.int64)).tolist())
        distinct.discard(0)
        return WeightBudget(total_weights=total, independent_weights=len(distinct))


def dnn(mats, ids=None, constant_input_slot=False):
    csr = tuple(_to_csr(w) for w in mats)
    if ids is None:
        out_ids = tuple(_ids_like(w) for w in csr)
    else:
        out_ids = []
        for w, i in zip(csr, ids):
            if sp.issparse(i):
                ii = i.tocsr()
                ii.sort_indices()
                out_ids.append(ii)
            else:
                out_ids.append(_ids_like(w, i))
        out_ids = tuple(out_ids)
    return Dnn(mats=csr, ids=out_ids, constant_input_slot=constant_input_slot)


@dataclass(frozen=True, eq=False)
class BasicRnn:
    """DNN with input size s + s' and output size s', applied along sequences."""

    dnn: Dnn
    input_size: int
    output_size: int

    def __post_init__(self):
        if self.dnn.input_size != self.input_size + self.output_size:
            raise ValidationError(
                f"basic RNN needs DNN input {self.input_size + self.output_size}, "
                f"got {self.dnn.input_size}"
            )
        if self.dnn.output_size != self.output_size:
            raise ValidationError("basic RNN output size mismatch")

    def budget(self):
        return self.dnn.budget()

    def is_elementwise(self):
        """True when the recurrent input columns carry no weight."""
        s = self.input_size
        w0 = self.dnn.mats[0]
        sub = w0[:, s : s + self.output_size]
        return sub.nnz == 0 or bool(np.all(sub.data == 0.0))


PLAIN = "plain"
INIT_WITH_LAST = "init_with_last"


@dataclass(frozen=True, eq=False)
class DeepRnn:
    """Finite stack of basic RNNs.  wiring[i] feeds stage i (stage 0 is plain)."""

    stages: tuple
    wiring: tuple

    def __post_init__(self):
        if len(self.stages) != len(self.wiring):
            raise ValidationError("stages/wiring length mismatch")
        if self.wiring and self.wiring[0] != PLAIN:
            raise ValidationError("stage 0 must be wired plain")
        prev_out = None
        for stage, wire in zip(self.stages, self.wiring):
            if wire not in (PLAIN, INIT_WITH_LAST):
                raise ValidationError(f"unknown wiring {wire!r}")
            if prev_out is not None:
                need = prev_out * (2 if wire == INIT_WITH_LAST else 1)
                if stage.input_size != need:
                    raise ValidationError(
                        f"stage input {stage.input_size} != wired width {need}"
                    )
            prev_out = stage.output_size

    @property
    def input_size(self):
        return self.stages[0].input_size

    @property
    def output_size(self):
        return self.stages[-1].output_size

    def budget(self):
        total = 0
        distinct = set()
        for stage in self.stages:
            b = stage.dnn.budget()
            total += b.total_weights
            for pid in stage.dnn.ids:
                distinct.update(np.unique(pid.data.astype(np.int64)).tolist())
        distinct.discard(0)
        return WeightBudget(total_weights=total, independent_weights=len(distinct))


def deep(stages, wiring=None):
    stages = tuple(stages)
    if wiring is None:
        wiring = (PLAIN,) + (INIT_WITH_LAST,) * (len(stages) - 1)
    return DeepRnn(stages=stages, wiring=tuple(wiring))


# ---------------------------------------------------------------------------
# evaluation


@njit(cache=True)
def _forward_batch(widths, row_ptr, cols, vals, X, out):
    L = widths.shape[0] - 1
    wmax = 0
    for i in range(widths.shape[0]):
        if widths[i] > wmax:
            wmax = widths[i]
    B = X.shape[0]
    a = np.empty(wmax)
    b = np.empty(wmax)
    for bi in range(B):
        for j in range(widths[0]):
            a[j] = X[bi, j]
        row = 0
        for l in range(L):
            nout = widths[l + 1]
            last = l == L - 1
            for r in range(nout):
                acc = 0.0
                for k in range(row_ptr[row], row_ptr[row + 1]):
                    acc += vals[k] * a[cols[k]]
                if not last and acc < 0.0:
                    acc = 0.0
                b[r] = acc
                row += 1
            for j in range(nout):
                a[j] = b[j]
        for j in range(widths[L]):
            out[bi, j] = a[j]


@njit(cache=True)
def _scan_batch(widths, row_ptr, cols, vals, XS, out, s, s_out, slot):
    # XS: (B, n, s); out: (B, n, s_out); recurrence y_0 = 0 per batch row
    L = widths.shape[0] - 1
    wmax = 0
    for i in range(widths.shape[0]):
        if widths[i] > wmax:
            wmax = widths[i]
    B = XS.shape[0]
    n = XS.shape[1]
    a = np.empty(wmax)
    b = np.empty(wmax)
    y = np.empty(s_out)
    for bi in range(B):
        for j in range(s_out):
            y[j] = 0.0
        for i in range(n):
            for j in range(s):
                a[j] = XS[bi, i, j]
            for j in range(s_out):
                a[s + j] = y[j]
            if slot:
                a[s + s_out] = 1.0
            row = 0
            for l in range(L):
                nout = widths[l + 1]
                last = l == L - 1
                for r in range(nout):
                    acc = 0.0
                    for k in range(row_ptr[row], row_ptr[row + 1]):
                        acc += vals[k] * a[cols[k]]
                    if not last and acc < 0.0:
                        acc = 0.0
                    b[r] = acc
                    row += 1
                for j in range(nout):
                    a[j] = b[j]
            for j in range(s_out):
                y[j] = a[j]
                out[bi, i, j] = a[j]


def _pack(net):
    prog = net._prog
    if "widths" not in prog:
        widths = [net.mats[0].shape[1]]
        ptrs = [np.zeros(1, dtype=np.int64)]
        cols = []
        vals = []
        offset = 0
        for w in net.mats:
            widths.append(w.shape[0])
            w.sort_indices()
            ptrs.append(w.indptr[1:].astype(np.int64) + offset)
            cols.append(w.indices.astype(np.int64))
            vals.append(w.data)
            offset += w.nnz
        prog["widths"] = np.asarray(widths, dtype=np.int64)
        prog["row_ptr"] = np.concatenate(ptrs)
        prog["cols"] = (
            np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        )
        prog["vals"] = (
            np.concatenate(vals) if vals else np.zeros(0, dtype=np.float64)
        )
    return prog["widths"], prog["row_ptr"], prog["cols"], prog["vals"]


def eval_dnn(net, x):
    """Exact forward pass; x is (s,) or a batch (B, s)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != net.input_size:
        raise ValidationError(f"expected input size {net.input_size}, got {X.shape[1]}")
    if net.constant_input_slot:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
    widths, row_ptr, cols, vals = _pack(net)
    out = np.empty((X.shape[0], net.output_size))
    _forward_batch(widths, row_ptr, cols, vals, np.ascontiguousarray(X), out)
    return out[0] if single else out


def eval_basic_rnn(net, xs):
    """Sequence evaluation with y_0 = 0; xs is (n, s) or batched (B, n, s)."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs.reshape(-1, 1)
    single = xs.ndim == 2
    XS = xs.reshape((1,) + xs.shape) if single else xs
    if XS.shape[2] != net.input_size:
        raise ValidationError(
            f"expected sequence entries of size {net.input_size}, got {XS.shape[2]}"
        )
    if net.is_elementwise():
        # recurrence carries no weight: apply the DNN positionwise in one batch
        flat = XS.reshape(-1, XS.shape[2])
        padded = np.hstack([flat, np.zeros((flat.shape[0], net.output_size))])
        out = eval_dnn(net.dnn, padded)
        out = out.reshape(XS.shape[0], XS.shape[1], net.output_size)
        return out[0] if single else out
    widths, row_ptr, cols, vals = _pack(net.dnn)
    out = np.empty((XS.shape[0], XS.shape[1], net.output_size))
    _scan_batch(
        widths,
        row_ptr,
        cols,
        vals,
        np.ascontiguousarray(XS),
        out,
        net.input_size,
        net.output_size,
        net.dnn.constant_input_slot,
    )
    return out[0] if single else out


def _stage_input(prev_out, wire):
    if wire == PLAIN:
        return prev_out
    init = np.zeros_like(prev_out)
    init[..., 0, :] = prev_out[..., -1, :]
    return np.concatenate([prev_out, init], axis=-1)


def eval_deep_rnn(net, xs):
    """Stage-by-stage evaluation honoring the wiring flags."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs.reshape(-1, 1)
    cur = xs
    for stage, wire in zip(net.stages, net.wiring):
        if wire == INIT_WITH_LAST:
            cur = _stage_input(cur, wire)
        cur = eval_basic_rnn(stage, cur)
    return cur


def impulse_sequence(x, n):
    """Sequence (x, 0, ..., 0) of length n."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    xs = np.zeros((n, x.shape[0]))
    xs[0] = x
    return xs


def run_impulse(net, x, n):
    """Evaluate a deep RNN on (x, 0, ..., 0) and return the last output."""
    return eval_deep_rnn(net, impulse_sequence(x, n))[-1]


# ---------------------------------------------------------------------------
# elementary constructions


def identity_dnn(size, depth=1):
    """id(x) = max(x, 0) - max(-x, 0), extendable to any depth >= 1."""
    eye = np.eye(size)
    first = np.vstack([eye, -eye])
    mats = [first]
    for _ in range(depth - 1):
        mats.append(np.eye(2 * size))
    mats.append(np.hstack([eye, -eye]))
    uid = next(_param_counter)
    ids = []
    for w in mats:
        i = np.zeros(w.shape, dtype=np.int64)
        i[w != 0] = uid
        ids.append(i)
    return dnn(mats, ids)


def matrix_dnn(M):
    """Exact multiplication by a fixed matrix as a depth-2 DNN."""
    M = np.asarray(M, dtype=np.float64)
    s_out, s_in = M.shape
    eye = np.eye(s_in)
    w0 = np.vstack([eye, -eye])
    w1 = np.block([[M, -M], [-M, M]])
    w2 = np.hstack([np.eye(s_out), -np.eye(s_out)])
    return dnn([w0, w1, w2])


def _stack2(a, b):
    """Row-stack two structurally parallel (weights, ids) csr pairs."""
    return sp.vstack(a, format="csr"), sp.vstack(b, format="csr")


def compose(a, b):
    """a after b, exactly: eval(compose(a, b), x) == eval(a, eval(b, x)).

    The junction duplicates b's output into (+, -) parts instead of merging
    matrices, which preserves every intermediate value bitwise.
    """
    if a.input_size != b.output_size:
        raise ValidationError(
            f"compose: a expects {a.input_size}, b produces {b.output_size}"
        )
    if a.constant_input_slot:
        raise ValidationError("compose: inner constant slots are not supported")
    blast, blast_ids = b.mats[-1], b.ids[-1]
    junction, junction_ids = _stack2([blast, -blast], [blast_ids, blast_ids])
    a0, a0_ids = a.mats[0], a.ids[0]
    merged = sp.hstack([a0, -a0], format="csr")
    merged_ids = sp.hstack([a0_ids, a0_ids], format="csr")
    mats = b.mats[:-1] + (junction, merged) + a.mats[1:]
    ids = b.ids[:-1] + (junction_ids, merged_ids) + a.ids[1:]
    return Dnn(mats=mats, ids=ids, constant_input_slot=b.constant_input_slot)


def extend_depth(net, depth):
    """Pad net with identity layers until it has the requested depth."""
    if net.depth > depth:
        raise ValidationError("cannot shrink depth")
    while net.depth < depth:
        last, last_ids = net.mats[-1], net.ids[-1]
        s = last.shape[0]
        eye = sp.identity(s, format="csr")
        uid = float(next(_param_counter))
        split, split_ids = _stack2([last, -last], [last_ids, last_ids])
        recomb = sp.hstack([eye, -eye], format="csr")
        recomb_ids = recomb.copy()
        recomb_ids.data = np.full_like(recomb_ids.data, uid)
        net = Dnn(
            mats=net.mats[:-1] + (split, recomb),
            ids=net.ids[:-1] + (split_ids, recomb_ids),
            constant_input_slot=net.constant_input_slot,
        )
    return net


def parallel(*nets):
    """Apply networks side by side on concatenated inputs.

    Depths are equalized with identity extensions; a shared constant slot is
    appended last when any operand uses one.
    """
    if len(nets) == 1 and isinstance(nets[0], (list, tuple)):
        nets = tuple(nets[0])
    target = max(n.depth for n in nets)
    nets = [n if n.depth == target else extend_depth(n, target) for n in nets]
    slot = any(n.constant_input_slot for n in nets)
    mats, ids = [], []
    in_sizes = [n.input_size for n in nets]
    total_in = sum(in_sizes) + (1 if slot else 0)
    row_blocks_w, row_blocks_i = [], []
    c0 = 0
    for n in nets:
        w0, i0 = n.mats[0], n.ids[0]
        main_w = w0[:, : n.input_size]
        main_i = i0[:, : n.input_size]
        left = sp.csr_matrix((w0.shape[0], c0))
        right_cols = total_in - c0 - n.input_size - (1 if slot else 0)
        right = sp.csr_matrix((w0.shape[0], right_cols))
        if slot:
            if n.constant_input_slot:
                slot_w = w0[:, -1:]
                slot_i = i0[:, -1:]
            else:
                slot_w = sp.csr_matrix((w0.shape[0], 1))
                slot_i = sp.csr_matrix((w0.shape[0], 1))
            row_blocks_w.append(sp.hstack([left, main_w, right, slot_w], format="csr"))
            row_blocks_i.append(sp.hstack([left, main_i, right, slot_i], format="csr"))
        else:
            row_blocks_w.append(sp.hstack([left, main_w, right], format="csr"))
            row_blocks_i.append(sp.hstack([left, main_i, right], format="csr"))
        c0 += n.input_size
    mats.append(sp.vstack(row_blocks_w, format="csr"))
    ids.append(sp.vstack(row_blocks_i, format="csr"))
    for layer in range(1, target + 1):
        mats.append(sp.block_diag([n.mats[layer] for n in nets], format="csr"))
        ids.append(sp.block_diag([n.ids[layer] for n in nets], format="csr"))
    return Dnn(mats=tuple(mats), ids=tuple(ids), constant_input_slot=slot)


def pass_through(net, extra=1):
    """Extend a network so it copies `extra` additional inputs to its output."""
    if isinstance(net, DeepRnn):
        stages = []
        for stage, wire in zip(net.stages, net.wiring):
            width = extra * (2 if wire == INIT_WITH_LAST else 1)
            stages.append(_pass_through_basic(stage, width, keep=extra))
        return DeepRnn(stages=tuple(stages), wiring=net.wiring)
    if isinstance(net, BasicRnn):
        return _pass_through_basic(net, extra, keep=extra)
    return parallel(net, identity_dnn(extra))


def _pass_through_basic(stage, extra_in, keep):
    """Basic RNN that additionally copies `extra_in` extra inputs to the output.

    Input layout becomes (x, extras, y_prev, extras_prev); the recurrent copy
    of the extras is ignored, only the first `keep` extras are emitted (a
    stage wired init_with_last sees its extras duplicated but must re-emit
    them once).
    """
    d = stage.dnn
    s, s_out = stage.input_size, stage.output_size
    new_s = s + extra_in
    new_out = s_out + keep
    slot = d.constant_input_slot
    uid = next(_param_counter)
    mats, ids = [], []
    L = d.depth + 1
    if L == 1:
        w, wi = d.dense(0), d.dense_ids(0)
        cols = new_s + new_out + (1 if slot else 0)
        nw = np.zeros((new_out, cols))
        ni = np.zeros(nw.shape, dtype=np.int64)
        nw[:s_out, :s] = w[:, :s]
        ni[:s_out, :s] = wi[:, :s]
        nw[:s_out, new_s : new_s + s_out] = w[:, s : s + s_out]
        ni[:s_out, new_s : new_s + s_out] = wi[:, s : s + s_out]
        if slot:
            nw[:s_out, -1] = w[:, -1]
            ni[:s_out, -1] = wi[:, -1]
        for e in range(keep):
            nw[s_out + e, s + e] = 1.0
            ni[s_out + e, s + e] = uid
        return BasicRnn(
            dnn=dnn([nw], [ni], constant_input_slot=slot),
            input_size=new_s,
            output_size=new_out,
        )
    for layer in range(L):
        w, wi = d.dense(layer), d.dense_ids(layer)
        if layer == 0:
            cols = new_s + new_out + (1 if slot else 0)
            nw = np.zeros((w.shape[0] + 2 * extra_in, cols))
            ni = np.zeros(nw.shape, dtype=np.int64)
            nw[: w.shape[0], :s] = w[:, :s]
            ni[: w.shape[0], :s] = wi[:, :s]
            nw[: w.shape[0], new_s : new_s + s_out] = w[:, s : s + s_out]
            ni[: w.shape[0], new_s : new_s + s_out] = wi[:, s : s + s_out]
            if slot:
                nw[: w.shape[0], -1] = w[:, -1]
                ni[: w.shape[0], -1] = wi[:, -1]
            for e in range(extra_in):
                nw[w.shape[0] + 2 * e, s + e] = 1.0
                nw[w.shape[0] + 2 * e + 1, s + e] = -1.0
                ni[w.shape[0] + 2 * e, s + e] = uid
                ni[w.shape[0] + 2 * e + 1, s + e] = uid
        elif layer < L - 1:
            nw = np.zeros((w.shape[0] + 2 * extra_in, w.shape[1] + 2 * extra_in))
            ni = np.zeros(nw.shape, dtype=np.int64)
            nw[: w.shape[0], : w.shape[1]] = w
            ni[: w.shape[0], : w.shape[1]] = wi
            for e in range(2 * extra_in):
                nw[w.shape[0] + e, w.shape[1] + e] = 1.0
                ni[w.shape[0] + e, w.shape[1] + e] = uid
        else:
            nw = np.zeros((s_out + keep, w.shape[1] + 2 * extra_in))
            ni = np.zeros(nw.shape, dtype=np.int64)
            nw[:s_out, : w.shape[1]] = w
            ni[:s_out, : w.shape[1]] = wi
            for e in range(keep):
                nw[s_out + e, w.shape[1] + 2 * e] = 1.0
                nw[s_out + e, w.shape[1] + 2 * e + 1] = -1.0
                ni[s_out + e, w.shape[1] + 2 * e] = uid
                ni[s_out + e, w.shape[1] + 2 * e + 1] = uid
        mats.append(nw)
        ids.append(ni)
    return BasicRnn(
        dnn=dnn(mats, ids, constant_input_slot=slot),
        input_size=new_s,
        output_size=new_out,
    )


def unroll(net, n):
    """Basic RNN as a DNN over the flattened length-n input sequence.

    Input layout (x_1 | ... | x_n), output (y_1 | ... | y_n).  The step's
    weights are tiled (ids shared) and pending inputs / collected outputs
    ride on paired relu channels, so the result matches eval_basic_rnn bit
    for bit while the independent-weight count stays that of one step.

    The vector entering chain step i (0-based) is laid out as
    (x_i | ... | x_{n-1} | y_0 | ... | y_{i-1} [| one]); the step consumes
    the leading x_i and the trailing y_{i-1} and everything else is carried.
    Between chain steps every logical value v is stored as the relu pair
    (max(v,0), max(-v,0)) so the activation between step blocks is a no-op.
    """
    if n < 1:
        raise ValidationError("unroll needs n >= 1")
    s, s_out = net.input_size, net.output_size
    d = net.dnn
    slot = d.constant_input_slot
    carry_uid = next(_param_counter)
    L = d.depth + 1
    if L < 2:
        raise ValidationError("unroll needs a step DNN of depth >= 1")
    dense_w = [d.dense(layer) for layer in range(L)]
    dense_i = [d.dense_ids(layer) for layer in range(L)]

    mats, ids = [], []
    for i in range(n):
        m_i = (n - i) * s + i * s_out + (1 if slot else 0)  # logical width in
        n_carry = m_i - s
        y_start = (n - i) * s + (i - 1) * s_out
        paired_in = i > 0
        last_step = i == n - 1

        def _read(row_w, row_i, logical_col, w_val, id_val):
            if paired_in:
                row_w[2 * logical_col] += w_val
                row_w[2 * logical_col + 1] -= w_val
                row_i[2 * logical_col] = id_val
                row_i[2 * logical_col + 1] = id_val
            else:
                row_w[logical_col] += w_val
                row_i[logical_col] = id_val

        for layer in range(L):
            w, wi = dense_w[layer], dense_i[layer]
            if layer == 0:
                cols = 2 * m_i if paired_in else m_i
                nw = np.zeros((w.shape[0] + 2 * n_carry, cols))
                ni = np.zeros(nw.shape, dtype=np.int64)
                for r in range(w.shape[0]):
                    for c in range(s):
                        if w[r, c] != 0.0:
                            _read(nw[r], ni[r], c, w[r, c], wi[r, c])
                    if i > 0:
                        for c in range(s_out):
                            if w[r, s + c] != 0.0:
                                _read(nw[r], ni[r], y_start + c, w[r, s + c], wi[r, s + c])
                    if slot and w[r, -1] != 0.0:
                        _read(nw[r], ni[r], m_i - 1, w[r, -1], wi[r, -1])
                base = w.shape[0]
                for e, c in enumerate(range(s, m_i)):
                    _read(nw[base + 2 * e], ni[base + 2 * e], c, 1.0, carry_uid)
                    _read(nw[base + 2 * e + 1], ni[base + 2 * e + 1], c, -1.0, carry_uid)
            elif layer < L - 1:
                nw = np.zeros((w.shape[0] + 2 * n_carry, w.shape[1] + 2 * n_carry))
                ni = np.zeros(nw.shape, dtype=np.int64)
                nw[: w.shape[0], : w.shape[1]] = w
                ni[: w.shape[0], : w.shape[1]] = wi
                for e in range(2 * n_carry):
                    nw[w.shape[0] + e, w.shape[1] + e] = 1.0
                    ni[w.shape[0] + e, w.shape[1] + e] = carry_uid
            else:
                nw, ni = _unroll_step_output(
                    w, wi, s_out, n_carry, slot, last_step, carry_uid
                )
            mats.append(nw)
            ids.append(ni)
    return dnn(mats, ids, constant_input_slot=slot)


def _unroll_step_output(w, wi, s_out, n_carry, slot, last_step, carry_uid):
    """Chain-step output: logical order (carries..., y_i [, one])."""
    n_regular = n_carry - (1 if slot else 0)
    cols = w.shape[1] + 2 * n_carry
    if last_step:
        nw = np.zeros((n_regular + s_out, cols))
        ni = np.zeros(nw.shape, dtype=np.int64)
        for e in range(n_regular):
            nw[e, w.shape[1] + 2 * e] = 1.0
            nw[e, w.shape[1] + 2 * e + 1] = -1.0
            ni[e, w.shape[1] + 2 * e] = carry_uid
            ni[e, w.shape[1] + 2 * e + 1] = carry_uid
        nw[n_regular:, : w.shape[1]] = w
        ni[n_regular:, : w.shape[1]] = wi
        return nw, ni
    rows = 2 * (n_regular + s_out) + (2 if slot else 0)
    nw = np.zeros((rows, cols))
    ni = np.zeros(nw.shape, dtype=np.int64)
    for e in range(n_regular):  # pair-preserving copy
        nw[2 * e, w.shape[1] + 2 * e] = 1.0
        nw[2 * e, w.shape[1] + 2 * e + 1] = -1.0
        nw[2 * e + 1, w.shape[1] + 2 * e] = -1.0
        nw[2 * e + 1, w.shape[1] + 2 * e + 1] = 1.0
        for rr in (2 * e, 2 * e + 1):
            ni[rr, w.shape[1] + 2 * e] = carry_uid
            ni[rr, w.shape[1] + 2 * e + 1] = carry_uid
    base = 2 * n_regular
    for j in range(s_out):  # interleaved (+, -) pair per output component
        nw[base + 2 * j, : w.shape[1]] = w[j]
        ni[base + 2 * j, : w.shape[1]] = wi[j]
        nw[base + 2 * j + 1, : w.shape[1]] = -w[j]
        ni[base + 2 * j + 1, : w.shape[1]] = wi[j]
    if slot:
        e = n_carry - 1
        nw[-2, w.shape[1] + 2 * e] = 1.0
        nw[-2, w.shape[1] + 2 * e + 1] = -1.0
        nw[-1, w.shape[1] + 2 * e] = -1.0
        nw[-1, w.shape[1] + 2 * e + 1] = 1.0
        for rr in (-2, -1):
            ni[rr, w.shape[1] + 2 * e] = carry_uid
            ni[rr, w.shape[1] + 2 * e + 1] = carry_uid
    return nw, ni


# ---------------------------------------------------------------------------
# serialization


def _mat_lines(net, j):
    w = net.dense(j)
    wi = net.dense_ids(j)
    out = [f"{w.shape[0]} {w.shape[1]}"]
    for r in range(w.shape[0]):
        out.append(" ".join(float(v).hex() for v in w[r]))
    for r in range(wi.shape[0]):
        out.append(" ".join(str(int(v)) for v in wi[r]))
    return out


def dnn_to_text(net):
    lines = [f"dnn {len(net.mats)} slot {int(net.constant_input_slot)}"]
    for j in range(len(net.mats)):
        lines.extend(_mat_lines(net, j))
    return "\n".join(lines) + "\n"


def deep_rnn_to_text(net):
    lines = [f"stages {len(net.stages)}"]
    for stage, wire in zip(net.stages, net.wiring):
        d = stage.dnn
        lines.append(
            f"basic {stage.input_size} {stage.output_size} {wire} "
            f"{len(d.mats)} slot {int(d.constant_input_slot)}"
        )
        for j in range(len(d.mats)):
            lines.extend(_mat_lines(d, j))
    return "\n".join(lines) + "\n"


def _read_mats(lines, pos, count):
    mats, ids = [], []
    for _ in range(count):
        rows, cols = (int(t) for t in lines[pos].split())
        pos += 1
        w = np.empty((rows, cols))
        for r in range(rows):
            w[r] = [float.fromhex(t) for t in lines[pos].split()]
            pos += 1
        wi = np.empty((rows, cols), dtype=np.int64)
        for r in range(rows):
            wi[r] = [int(t) for t in lines[pos].split()]
            pos += 1
        mats.append(w)
        ids.append(wi)
    return mats, ids, pos


def dnn_from_text(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if head[0] != "dnn":
        raise ValidationError("not a dnn header")
    mats, ids, _ = _read_mats(lines, 1, int(head[1]))
    return dnn(mats, ids, constant_input_slot=bool(int(head[3])))


def deep_rnn_from_text(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if head[0] != "stages":
        raise ValidationError("not a deep RNN header")
    n_stages = int(head[1])
    pos = 1
    stages, wiring = [], []
    for _ in range(n_stages):
        tok = lines[pos].split()
        pos += 1
        s, s_out, wire, n_mats, slot = (
            int(tok[1]),
            int(tok[2]),
            tok[3],
            int(tok[4]),
            bool(int(tok[6])),
        )
        mats, ids, pos = _read_mats(lines, pos, n_mats)
        d = dnn(mats, ids, constant_input_slot=slot)
        stages.append(BasicRnn(dnn=d, input_size=s, output_size=s_out))
        wiring.append(wire)
    return DeepRnn(stages=tuple(stages), wiring=tuple(wiring))

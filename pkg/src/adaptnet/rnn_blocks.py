"""Explicitly constructed network blocks with certified error bounds.

Every block here is built from plain weight matrices: the conditional
selector IF, the spline square and the polarization multiply, geometry
helpers (max-norm diameter, edge lengths via Newton inverse square roots),
the per-element error-indicator network, the bulk-marking chain
(threshold search, band rounding, tie bookkeeping), and the full
estimate-and-mark network with its stopping channel.

Exactness discipline: selection blocks (IF and everything downstream in the
marking chain) perform the same float operations in the same order as the
analytic oracles in `marking`, so their decisions can be certified bitwise.
Approximation blocks (square/multiply and the estimator) carry explicit
error bounds checked by the certificate suite.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from . import marking
from . import mesh as mesh_mod
from . import rnn_core as rc
from .errors import ValidationError

N_MIN_DOUBLE = 52  # resolvable relative gap of IEEE double mantissas


@dataclass(frozen=True)
class FloatModel:
    n_min: int = N_MIN_DOUBLE

    def __post_init__(self):
        if self.n_min < 1:
            raise ValidationError("n_min must be >= 1")


@dataclass(frozen=True)
class AdaptiveParams:
    theta: float
    eps: float
    eps_tol: float
    n: int = 40
    k: int = 40

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValidationError("theta must be in (0, 1)")
        if self.eps <= 0 or self.eps_tol <= 0:
            raise ValidationError("eps and eps_tol must be positive")
        if self.n < 1 or self.k < 1:
            raise ValidationError("n and k must be >= 1")


# ---------------------------------------------------------------------------
# assembly helpers


def _assemble(n_cols, subs, carries, outs, slot=False):
    """DNN over an n_cols-wide input vector.

    subs     list of (dnn, combos): each sub-network input (and its constant
             slot, when present) is fed a linear combination of the input
             columns; combo = {col: coeff}, col may be "slot".
    carries  combos forwarded unchanged (as relu pairs) next to the subs.
    outs     output rows over the keys ("s", i, k) = sub i, output k and
             ("c", j) = carry j.
    """
    blocks = [d for d, _ in subs]
    depth = max(b.depth for b in blocks) if blocks else 1
    blocks = [b if b.depth == depth else rc.extend_depth(b, depth) for b in blocks]
    if carries:
        blocks.append(rc.identity_dnn(len(carries), depth=depth))
    total_cols = n_cols + (1 if slot else 0)

    def col_of(key):
        if key == "slot":
            if not slot:
                raise ValidationError("combo references slot but slot=False")
            return n_cols
        return key

    rows0 = sum(b.mats[0].shape[0] for b in blocks)
    W0 = np.zeros((rows0, total_cols))
    I0 = np.zeros((rows0, total_cols), dtype=np.int64)
    r = 0
    for bi, b in enumerate(blocks):
        w0, i0 = b.dense(0), b.dense_ids(0)
        if bi < len(subs):
            d, combos = subs[bi]
            need = d.input_size + (1 if d.constant_input_slot else 0)
            if len(combos) != need:
                raise ValidationError(
                    f"sub {bi} expects {need} input combos, got {len(combos)}"
                )
            for rr in range(w0.shape[0]):
                for m in range(need):
                    v = w0[rr, m]
                    if v == 0.0:
                        continue
                    for key, coeff in combos[m].items():
                        c = col_of(key)
                        W0[r + rr, c] += v * coeff
                        I0[r + rr, c] = i0[rr, m]
        else:
            # identity block layout: k rows of +combos, then k rows of -combos
            k = len(carries)
            uid = int(i0[i0 != 0][0]) if np.any(i0) else 1
            for j, combo in enumerate(carries):
                for key, coeff in combo.items():
                    c = col_of(key)
                    W0[r + j, c] += coeff
                    W0[r + k + j, c] -= coeff
                    I0[r + j, c] = uid
                    I0[r + k + j, c] = uid
        r += w0.shape[0]

    mats = [rc._to_csr(W0)]
    ids = [rc._ids_like(mats[0], I0)]
    for layer in range(1, depth + 1):
        mats.append(sp.block_diag([b.mats[layer] for b in blocks], format="csr"))
        ids.append(sp.block_diag([b.ids[layer] for b in blocks], format="csr"))
    core = rc.Dnn(mats=tuple(mats), ids=tuple(ids), constant_input_slot=slot)

    # output offsets: sub i's outputs start at out_off[i]; carries follow
    out_off = []
    pos = 0
    for b in blocks:
        out_off.append(pos)
        pos += b.output_size
    C = np.zeros((len(outs), pos))
    for orow, spec in enumerate(outs):
        for key, coeff in spec.items():
            if key[0] == "s":
                C[orow, out_off[key[1]] + key[2]] += coeff
            elif key[0] == "c":
                C[orow, out_off[len(subs)] + key[1]] += coeff
            else:
                raise ValidationError(f"bad output key {key!r}")
    return rc.compose(rc.matrix_dnn(C), core)


def make_step(s, s_out, subs, carries, outs, slot=False):
    """Basic-RNN step over the layout (x[0:s] | state[s:s+s_out] [| slot])."""
    if len(outs) != s_out:
        raise ValidationError("output rows must match the state size")
    d = _assemble(s + s_out, subs, carries, outs, slot=slot)
    return rc.BasicRnn(dnn=d, input_size=s, output_size=s_out)


def elementwise_stage(net, s, s_out):
    """Wrap a plain DNN (input s) as a recurrence-free basic RNN stage."""
    w0, i0 = net.dense(0), net.dense_ids(0)
    slot = net.constant_input_slot
    cols = s + s_out + (1 if slot else 0)
    nw = np.zeros((w0.shape[0], cols))
    ni = np.zeros(nw.shape, dtype=np.int64)
    nw[:, :s] = w0[:, :s]
    ni[:, :s] = i0[:, :s]
    if slot:
        nw[:, -1] = w0[:, -1]
        ni[:, -1] = i0[:, -1]
    w0c = rc._to_csr(nw)
    d = rc.Dnn(
        mats=(w0c,) + net.mats[1:],
        ids=(rc._ids_like(w0c, ni),) + net.ids[1:],
        constant_input_slot=slot,
    )
    return rc.BasicRnn(dnn=d, input_size=s, output_size=s_out)


def parallel_stages(subs, col_maps, s_total):
    """Combine basic-RNN steps side by side into one step.

    col_maps[j] lists, for sub j, the absolute input columns (within the
    combined x-part of width s_total) feeding its own x-part, in order.
    States are concatenated in sub order.
    """
    s_out = sum(b.output_size for b in subs)
    state_off = []
    pos = s_total
    for b in subs:
        state_off.append(pos)
        pos += b.output_size
    sub_specs = []
    for j, b in enumerate(subs):
        if len(col_maps[j]) != b.input_size:
            raise ValidationError(f"col map {j} has wrong length")
        combos = [{c: 1.0} for c in col_maps[j]]
        combos += [{state_off[j] + k: 1.0} for k in range(b.output_size)]
        if b.dnn.constant_input_slot:
            combos.append({"slot": 1.0})
        sub_specs.append((b.dnn, combos))
    outs = []
    for j, b in enumerate(subs):
        for k in range(b.output_size):
            outs.append({("s", j, k): 1.0})
    slot = any(b.dnn.constant_input_slot for b in subs)
    return make_step(s_total, s_out, sub_specs, [], outs, slot=slot)


def deep_impulse_dnn(net, n):
    """Deep RNN on impulse input (x, 0, ..., 0) of length n, as one DNN.

    Requires every stage past the first to read only its init channels (or,
    for plain-wired stages, to be recurrence-free); this holds for all the
    impulse-style blocks built here.  The chained DNN returns the final
    output y_n and keeps the stages' parameter ids, so repeated structure
    stays visible to the weight accounting.
    """
    stages, wiring = net.stages, net.wiring
    slot_any = any(st.dnn.constant_input_slot for st in stages)
    plan = []  # (stage, n_steps, reads_raw, init_from_state)
    for si, (stage, wire) in enumerate(zip(stages, wiring)):
        if si == 0:
            plan.append((stage, n, "raw", None))
            continue
        prev_out = stages[si - 1].output_size
        if wire == rc.INIT_WITH_LAST:
            sub = stage.dnn.mats[0][:, :prev_out]
            if sub.nnz and np.any(sub.data != 0.0):
                raise ValidationError(
                    "impulse chaining needs init-only stages (per-position weights found)"
                )
            plan.append((stage, n, "init", prev_out))
        else:
            if not stage.is_elementwise():
                raise ValidationError("plain recurrent stages cannot be impulse-chained")
            plan.append((stage, 1, "pos", prev_out))

    mats, ids = [], []
    carry_uid = next(rc._param_counter)
    total_steps = sum(p[1] for p in plan)
    step_no = 0
    for stage, steps, mode, prev_out in plan:
        d = stage.dnn
        s, s_out = stage.input_size, stage.output_size
        sslot = d.constant_input_slot
        L = d.depth + 1
        dense_w = [d.dense(layer) for layer in range(L)]
        dense_i = [d.dense_ids(layer) for layer in range(L)]
        for i in range(steps):
            step_no += 1
            global_last = step_no == total_steps
            first = i == 0
            for layer in range(L):
                w, wi = dense_w[layer], dense_i[layer]
                if layer == 0:
                    if mats:
                        in_width = mats[-1].shape[0]
                    else:
                        in_width = stages[0].input_size + (1 if slot_any else 0)
                    nw = np.zeros((w.shape[0] + (1 if slot_any else 0), in_width))
                    ni = np.zeros(nw.shape, dtype=np.int64)
                    one_col = in_width - 1
                    for rr in range(w.shape[0]):
                        if first:
                            if mode == "raw":
                                for c in range(s):
                                    nw[rr, c] = w[rr, c]
                                    ni[rr, c] = wi[rr, c]
                            elif mode == "init":
                                for c in range(prev_out):
                                    v = w[rr, prev_out + c]
                                    if v != 0.0 or wi[rr, prev_out + c] != 0:
                                        nw[rr, 2 * c] += v
                                        nw[rr, 2 * c + 1] -= v
                                        ni[rr, 2 * c] = wi[rr, prev_out + c]
                                        ni[rr, 2 * c + 1] = wi[rr, prev_out + c]
                            else:  # pos: elementwise map of the previous state
                                for c in range(s):
                                    v = w[rr, c]
                                    if v != 0.0 or wi[rr, c] != 0:
                                        nw[rr, 2 * c] += v
                                        nw[rr, 2 * c + 1] -= v
                                        ni[rr, 2 * c] = wi[rr, c]
                                        ni[rr, 2 * c + 1] = wi[rr, c]
                        else:
                            for c in range(s_out):
                                v = w[rr, s + c]
                                if v != 0.0 or wi[rr, s + c] != 0:
                                    nw[rr, 2 * c] += v
                                    nw[rr, 2 * c + 1] -= v
                                    ni[rr, 2 * c] = wi[rr, s + c]
                                    ni[rr, 2 * c + 1] = wi[rr, s + c]
                        if sslot:
                            v = w[rr, -1]
                            if v != 0.0 or wi[rr, -1] != 0:
                                nw[rr, one_col] += v
                                ni[rr, one_col] = wi[rr, -1]
                    if slot_any:
                        nw[w.shape[0], one_col] = 1.0
                        ni[w.shape[0], one_col] = carry_uid
                elif layer < L - 1:
                    extra = 1 if slot_any else 0
                    nw = np.zeros((w.shape[0] + extra, w.shape[1] + extra))
                    ni = np.zeros(nw.shape, dtype=np.int64)
                    nw[: w.shape[0], : w.shape[1]] = w
                    ni[: w.shape[0], : w.shape[1]] = wi
                    if slot_any:
                        nw[-1, -1] = 1.0
                        ni[-1, -1] = carry_uid
                else:
                    extra = 1 if slot_any else 0
                    if global_last:
                        nw = np.zeros((s_out, w.shape[1] + extra))
                        ni = np.zeros(nw.shape, dtype=np.int64)
                        nw[:, : w.shape[1]] = w
                        ni[:, : w.shape[1]] = wi
                    else:
                        nw = np.zeros((2 * s_out + extra, w.shape[1] + extra))
                        ni = np.zeros(nw.shape, dtype=np.int64)
                        for j in range(s_out):
                            nw[2 * j, : w.shape[1]] = w[j]
                            ni[2 * j, : w.shape[1]] = wi[j]
                            nw[2 * j + 1, : w.shape[1]] = -w[j]
                            ni[2 * j + 1, : w.shape[1]] = wi[j]
                        if slot_any:
                            nw[-1, -1] = 1.0
                            ni[-1, -1] = carry_uid
                wc = rc._to_csr(nw)
                mats.append(wc)
                ids.append(rc._ids_like(wc, ni))
    return rc.Dnn(mats=tuple(mats), ids=tuple(ids), constant_input_slot=slot_any)


# ---------------------------------------------------------------------------
# IF


def _if_step(comparator):
    """One doubling step of the conditional selector.

    State (A+, A-, P, Q): A± accumulate the split payload, P/Q run the
    min(2 relu(. + d), A±) recurrences with d injected at position 1.
    """
    if comparator in (">", "<="):
        d_b, d_c = 1.0, -1.0
    elif comparator in ("<", ">="):
        d_b, d_c = -1.0, 1.0
    else:
        raise ValidationError(f"unknown comparator {comparator!r}")
    # input layout: (a, b, c | A+, A-, P, Q)
    a, b, c, Ap, Am, P, Q = range(7)
    l0 = np.zeros((6, 7))
    l0[0, a] = 1.0                     # relu(a)
    l0[1, a] = -1.0                    # relu(-a)
    l0[2, Ap] = 1.0                    # A+ (nonnegative)
    l0[3, Am] = 1.0                    # A-
    l0[4, P] = 1.0
    l0[4, b] = d_b
    l0[4, c] = d_c                     # relu(P + d)
    l0[5, Q] = 1.0
    l0[5, b] = d_b
    l0[5, c] = d_c                     # relu(Q + d)
    l1 = np.zeros((6, 6))
    l1[0, 2] = 1.0
    l1[0, 0] = 1.0                     # A+' = A+ + relu(a)
    l1[1, 3] = 1.0
    l1[1, 1] = 1.0                     # A-'
    l1[2, 4] = 2.0
    l1[2, 2] = -1.0
    l1[2, 0] = -1.0                    # relu(2u+ - A+')
    l1[3, 5] = 2.0
    l1[3, 3] = -1.0
    l1[3, 1] = -1.0
    l1[4, 4] = 2.0                     # 2u+
    l1[5, 5] = 2.0
    l2 = np.zeros((4, 6))
    l2[0, 0] = 1.0
    l2[1, 1] = 1.0
    l2[2, 4] = 1.0
    l2[2, 2] = -1.0                    # P' = 2u+ - relu(2u+ - A+')
    l2[3, 5] = 1.0
    l2[3, 3] = -1.0
    d = rc.dnn([l0, l1, l2])
    return rc.BasicRnn(dnn=d, input_size=3, output_size=4)


def _if_step_wide(comparator, n_steps):
    """One-layer alternative: min(A±, 2^n relu(d)), accumulated once."""
    if comparator in (">", "<="):
        d_b, d_c = 1.0, -1.0
    else:
        d_b, d_c = -1.0, 1.0
    big = float(2.0 ** n_steps)
    a, b, c, Ap, Am, P, Q = range(7)
    l0 = np.zeros((7, 7))
    l0[0, a] = 1.0
    l0[1, a] = -1.0
    l0[2, Ap] = 1.0
    l0[3, Am] = 1.0
    l0[4, b] = d_b * big
    l0[4, c] = d_c * big               # t = 2^n relu(d)
    l0[5, P] = 1.0
    l0[6, Q] = 1.0
    l1 = np.zeros((7, 7))
    l1[0, 0] = 1.0
    l1[0, 2] = 1.0                     # A+'
    l1[1, 1] = 1.0
    l1[1, 3] = 1.0                     # A-'
    l1[2, 4] = 1.0                     # t
    l1[3, 4] = 1.0
    l1[3, 0] = -1.0
    l1[3, 2] = -1.0                    # relu(t - A+')
    l1[4, 4] = 1.0
    l1[4, 1] = -1.0
    l1[4, 3] = -1.0                    # relu(t - A-')
    l1[5, 5] = 1.0
    l1[6, 6] = 1.0
    l2 = np.zeros((4, 7))
    l2[0, 0] = 1.0
    l2[1, 1] = 1.0
    l2[2, 5] = 1.0
    l2[2, 2] = 1.0
    l2[2, 3] = -1.0                    # P' = P + (t - relu(t - A+')) = P + min(t, A+')
    l2[3, 6] = 1.0
    l2[3, 2] = 1.0
    l2[3, 4] = -1.0                    # Q' = Q + min(t, A-')
    d = rc.dnn([l0, l1, l2])
    return rc.BasicRnn(dnn=d, input_size=3, output_size=4)


def _if_selector(comparator):
    if comparator in (">", "<"):
        row = [[0.0, 0.0, 1.0, -1.0]]          # P - Q
    else:
        row = [[1.0, -1.0, -1.0, 1.0]]         # (A+ - P) - (A- - Q)
    return rc.matrix_dnn(row)


def build_if(comparator, n_steps=N_MIN_DOUBLE, variant="unrolled"):
    """Deep RNN computing IF(a; b <cmp> c) on ((a,b,c), 0, ..., 0).

    The default runs the doubling recurrence for n_steps positions; the
    "wide" variant gets the same answer in one shot using 2^n_steps-sized
    weights (the remark trade-off) and simply holds it afterwards.
    """
    if variant == "unrolled":
        step = _if_step(comparator)
    elif variant == "wide":
        step = _if_step_wide(comparator, n_steps)
    else:
        raise ValidationError(f"unknown IF variant {variant!r}")
    sel = elementwise_stage(_if_selector(comparator), 4, 1)
    return rc.DeepRnn(stages=(step, sel), wiring=(rc.PLAIN, rc.PLAIN))


def if_value(net, a, b, c, n_steps=N_MIN_DOUBLE):
    return float(rc.run_impulse(net, [a, b, c], n_steps)[0])


_IF_DNN_CACHE = {}


def if_dnn(comparator, n_steps=N_MIN_DOUBLE, variant="unrolled"):
    """IF as a DNN (a, b, c) -> value, for embedding into step networks."""
    key = (comparator, n_steps, variant)
    if key not in _IF_DNN_CACHE:
        steps = n_steps if variant == "unrolled" else 1
        _IF_DNN_CACHE[key] = deep_impulse_dnn(build_if(comparator, n_steps, variant), steps)
    return _IF_DNN_CACHE[key]


# ---------------------------------------------------------------------------
# SQUARE / MULTIPLY


def _halving_step():
    # h' = (x + h) / 2, signed
    l0 = np.array([[0.5, 0.5], [-0.5, -0.5]])
    l1 = np.array([[1.0, -1.0]])
    return rc.BasicRnn(dnn=rc.dnn([l0, l1]), input_size=1, output_size=1)


def _sawtooth_step(sx):
    """Spline accumulator step; reads its seed from input column sx - 1.

    State (t, acc, A): t runs the doubled sawtooth, acc accumulates
    16 acc + 4 G(t) + G(G(t)), A holds |seed|.
    """
    q = sx - 1
    t, acc, A = sx, sx + 1, sx + 2
    one = sx + 3  # slot column
    n_in = sx + 3
    l0 = np.zeros((6, n_in + 1))
    l0[0, q] = 1.0                      # q+
    l0[1, q] = -1.0                     # q-
    l0[2, t] = 1.0
    l0[3, acc] = 1.0
    l0[4, A] = 1.0
    l0[5, one] = 1.0
    l1 = np.zeros((6, 6))
    l1[0, 2] = 1.0
    l1[0, 0] = 1.0
    l1[0, 1] = 1.0                      # t_in = t + |q|
    l1[1, 2] = 1.0
    l1[1, 0] = 1.0
    l1[1, 1] = 1.0
    l1[1, 5] = -0.5                     # t_in - 1/2
    l1[2, 2] = 1.0
    l1[2, 0] = 1.0
    l1[2, 1] = 1.0
    l1[2, 5] = -1.0                     # t_in - 1
    l1[3, 3] = 1.0                      # acc
    l1[4, 4] = 1.0
    l1[4, 0] = 1.0
    l1[4, 1] = 1.0                      # A' = A + |q|
    l1[5, 5] = 1.0                      # one
    l2 = np.zeros((5, 6))
    l2[0, 0] = 2.0
    l2[0, 1] = -4.0
    l2[0, 2] = 2.0                      # G1 = G(t_in) >= 0
    l2[1, 0] = 2.0
    l2[1, 1] = -4.0
    l2[1, 2] = 2.0
    l2[1, 5] = -0.5                     # G1 - 1/2
    l2[2, 0] = 2.0
    l2[2, 1] = -4.0
    l2[2, 2] = 2.0
    l2[2, 5] = -1.0                     # G1 - 1
    l2[3, 3] = 1.0                      # acc
    l2[4, 4] = 1.0                      # A'
    l3 = np.zeros((3, 5))
    l3[0, 0] = 2.0
    l3[0, 1] = -4.0
    l3[0, 2] = 2.0                      # t' = G(G1)
    l3[1, 3] = 16.0
    l3[1, 0] = 6.0
    l3[1, 1] = -4.0
    l3[1, 2] = 2.0                      # acc' = 16 acc + 4 G1 + G2
    l3[2, 4] = 1.0                      # A'
    d = rc.dnn([l0, l1, l2, l3], constant_input_slot=True)
    return rc.BasicRnn(dnn=d, input_size=sx, output_size=3)


def _descale_step():
    # input (t, acc, A | init t, acc, A), state (z, A2), both nonnegative
    l0 = np.zeros((4, 8))
    l0[0, 4] = 1.0 / 16.0
    l0[0, 6] = 1.0 / 16.0               # z' = (init_acc + z) / 16
    l0[1, 5] = 1.0
    l0[1, 7] = 1.0                      # A2' = A2 + init_A
    l1 = np.zeros((2, 4))
    l1[0, 0] = 1.0
    l1[1, 1] = 1.0
    return rc.BasicRnn(dnn=rc.dnn([l0, l1]), input_size=6, output_size=2)


def _final_step(upscale):
    # input (z, A | init z, init A), state r (signed):
    # r' = r + (init_A - init_z)            (plain hold)
    # r' = 4 r + 4 init_A - 4 init_z        (scale-back variant)
    g = 4.0 if upscale else 1.0
    l0 = np.zeros((2, 5))
    l0[0, 4] = g
    l0[0, 3] = g
    l0[0, 2] = -g
    l0[1, 4] = -g
    l0[1, 3] = -g
    l0[1, 2] = g
    l1 = np.array([[1.0, -1.0]])
    return rc.BasicRnn(dnn=rc.dnn([l0, l1]), input_size=4, output_size=1)


def build_square(n, scale_exponent=0):
    """Deep RNN approximating x^2 on impulse sequences of length n.

    scale_exponent 0 works on [-1, 1] with error <= 4^{-2n} (the output is
    the piecewise-linear interpolant of t^2 on a 2^{-2n} grid); with
    scale_exponent = n the input range grows to [-2^n, 2^n] at error 4^{-n}.
    Other exponents would need their own sequence lengths and are not used.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if scale_exponent not in (0, n):
        raise ValidationError("scale_exponent must be 0 or n")
    if scale_exponent == 0:
        stages = [_sawtooth_step(1), _descale_step(), _final_step(False)]
    else:
        stages = [
            _halving_step(),
            _sawtooth_step(2),
            _descale_step(),
            _final_step(True),
        ]
    return rc.deep(stages)


def square_value(net, x, n):
    return float(rc.run_impulse(net, [x], n)[0])


def _mul_prep_step():
    # accumulate-once (x + y, x, y), signed state
    M = np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    l0 = np.zeros((6, 5))
    for j in range(3):
        l0[2 * j, :2] = M[j]
        l0[2 * j, 2 + j] = 1.0
        l0[2 * j + 1, :2] = -M[j]
        l0[2 * j + 1, 2 + j] = -1.0
    l1 = np.zeros((3, 6))
    for j in range(3):
        l1[j, 2 * j] = 1.0
        l1[j, 2 * j + 1] = -1.0
    return rc.BasicRnn(dnn=rc.dnn([l0, l1]), input_size=2, output_size=3)


def _combine_step(weights):
    # r' = r + sum_j weights[j] * init_j, signed hold
    m = len(weights)
    l0 = np.zeros((2, 2 * m + 1))
    for j, wv in enumerate(weights):
        l0[0, m + j] = wv
        l0[1, m + j] = -wv
    l0[0, 2 * m] = 1.0
    l0[1, 2 * m] = -1.0
    l1 = np.array([[1.0, -1.0]])
    return rc.BasicRnn(dnn=rc.dnn([l0, l1]), input_size=2 * m, output_size=1)


def build_multiply(n):
    """Deep RNN computing x*y via the polarization identity.

    Inputs ((x, y), 0, ..., 0) of length n with |x|, |y| <= 2^{n-1};
    |output - x y| <= 2 * 4^{-n} (three scaled squares, each 4^{-n}-close).
    """
    halve = _halving_step()
    saw = _sawtooth_step(2)
    desc = _descale_step()
    fin = _final_step(True)
    stages = [
        _mul_prep_step(),
        parallel_stages([halve] * 3, [[3], [4], [5]], 6),
        parallel_stages([saw] * 3, [[0, 3], [1, 4], [2, 5]], 6),
        parallel_stages(
            [desc] * 3, [[0, 1, 2, 9, 10, 11], [3, 4, 5, 12, 13, 14], [6, 7, 8, 15, 16, 17]], 18
        ),
        parallel_stages([fin] * 3, [[0, 1, 6, 7], [2, 3, 8, 9], [4, 5, 10, 11]], 12),
        _combine_step([0.5, -0.5, -0.5]),
    ]
    return rc.deep(stages)


def multiply_value(net, x, y, n):
    return float(rc.run_impulse(net, [x, y], n)[0])


_MUL_DNN_CACHE = {}


def multiply_dnn(n):
    """MULTIPLY as a DNN (x, y) -> approximate product."""
    if n not in _MUL_DNN_CACHE:
        _MUL_DNN_CACHE[n] = deep_impulse_dnn(build_multiply(n), n)
    return _MUL_DNN_CACHE[n]


_SQ_DNN_CACHE = {}


def square_dnn(n, scale_exponent=0):
    key = (n, scale_exponent)
    if key not in _SQ_DNN_CACHE:
        _SQ_DNN_CACHE[key] = deep_impulse_dnn(build_square(n, scale_exponent), n)
    return _SQ_DNN_CACHE[key]


# ---------------------------------------------------------------------------
# DIAM


def build_diam():
    """Exact max-norm diameter of a triangle from its six coordinates."""
    # L0: relu(+-(coordinate differences)) for the three vertex pairs
    pairs = [(0, 1), (0, 2), (1, 2)]
    l0 = np.zeros((12, 6))
    r = 0
    for a, b in pairs:
        for coord in (0, 1):
            l0[r, 2 * a + coord] = 1.0
            l0[r, 2 * b + coord] = -1.0
            l0[r + 1, 2 * a + coord] = -1.0
            l0[r + 1, 2 * b + coord] = 1.0
            r += 2
    # per pair p: units (|dy_p|, relu(|dx_p| - |dy_p|))
    l1 = np.zeros((6, 12))
    for p in range(3):
        dx_p, dx_m, dy_p, dy_m = 4 * p, 4 * p + 1, 4 * p + 2, 4 * p + 3
        l1[2 * p, dy_p] = 1.0
        l1[2 * p, dy_m] = 1.0
        l1[2 * p + 1, dx_p] = 1.0
        l1[2 * p + 1, dx_m] = 1.0
        l1[2 * p + 1, dy_p] = -1.0
        l1[2 * p + 1, dy_m] = -1.0
    # m_p = max(|dx|, |dy|) = |dy| + relu(|dx| - |dy|)
    l2 = np.zeros((3, 6))
    for p in range(3):
        l2[p, 2 * p] = 1.0
        l2[p, 2 * p + 1] = 1.0
    # max of three: two nested max gadgets
    l3 = np.zeros((3, 3))
    l3[0, 0] = 1.0
    l3[0, 1] = -1.0     # relu(m0 - m1)
    l3[1, 1] = 1.0      # m1
    l3[2, 2] = 1.0      # m2
    l4 = np.zeros((2, 3))
    l4[0, 0] = 1.0
    l4[0, 1] = 1.0
    l4[0, 2] = -1.0     # relu(max(m0, m1) - m2)
    l4[1, 2] = 1.0      # m2
    l5 = np.array([[1.0, 1.0]])
    return rc.dnn([l0, l1, l2, l3, l4, l5])


# ---------------------------------------------------------------------------
# value pipelines (estimator ingredients)


def _relu1_dnn():
    return rc.dnn([[[1.0]], [[1.0]]])


class _Pipe:
    """Composes macro-layers of parallel one-output ops over named wires."""

    def __init__(self, names, slot=True):
        self.names = list(names)
        self.slot = slot
        self.net = None

    def _combo(self, spec):
        out = {}
        for nm, cf in spec.items():
            if nm == "slot":
                key = "slot"
            else:
                key = self.names.index(nm)
            out[key] = out.get(key, 0.0) + cf
        return out

    def step(self, ops, keep):
        """ops: (out_name, dnn, [input specs]); keep: names or (name, spec).

        A slotted sub-network whose spec list covers only its plain inputs is
        wired to the pipeline's constant wire "one" automatically.
        """
        subs = []
        for _, d, specs in ops:
            if d.constant_input_slot and len(specs) == d.input_size:
                specs = list(specs) + [{"one": 1.0}]
            subs.append((d, [self._combo(s) for s in specs]))
        keep_specs = [
            (k, {k: 1.0}) if isinstance(k, str) else k for k in keep
        ]
        carries = [self._combo(spec) for _, spec in keep_specs]
        outs = [{("s", i, 0): 1.0} for i in range(len(ops))]
        outs += [{("c", j): 1.0} for j in range(len(keep_specs))]
        first = self.net is None
        net = _assemble(len(self.names), subs, carries, outs, slot=first and self.slot)
        self.net = net if first else rc.compose(net, self.net)
        self.names = [nm for nm, _, _ in ops] + [nm for nm, _ in keep_specs]

    def finish(self, out_specs):
        C = np.zeros((len(out_specs), len(self.names)))
        for r, spec in enumerate(out_specs):
            for nm, cf in spec.items():
                C[r, self.names.index(nm)] = cf
        return rc.compose(rc.matrix_dnn(C), self.net)


def _acc(n, m_exp):
    """Multiply accuracy for operands bounded by 2^m_exp.

    The window needs n >= m_exp + 1; beyond (53 - m_exp) / 3 the spline gain
    is lost to the float round-off amplified by the 2^n scaling stages, so
    the requested accuracy saturates there.
    """
    opt = max(4, (53 - m_exp) // 3)
    return max(m_exp + 2, min(n, opt))


_DAMP = 2.0 ** -8  # selector payload damping; widens the resolvable gap


def _band_selectors(base, J, payload, cond="z"):
    """Banked exact rescaling: out = payload * scale(j0) on z's dyadic band.

    For each band [base^j, base^(j+1)) two comparator blocks carry the
    damped payload; their difference is exactly zero off the band, so the
    sum reproduces payload * base-power exactly (powers of two only).
    """
    ops = []
    for j in range(-J, J):
        for side, thr in (("lo", base ** j), ("hi", base ** (j + 1))):
            ops.append(
                (
                    f"b{side}{j}",
                    if_dnn(">="),
                    [
                        {k: v * _DAMP for k, v in payload(j).items()},
                        {cond: 1.0},
                        {"one": float(thr)},
                    ],
                )
            )
    return ops


def _band_sum(J):
    spec = {}
    for j in range(-J, J):
        spec[f"blo{j}"] = 1.0 / _DAMP
        spec[f"bhi{j}"] = -1.0 / _DAMP
    return spec


_SQRT_CACHE = {}


def sqrt_dnn(n, J=12, iters=6):
    """sqrt(z) for z in [4^-J, 4^J), as a DNN over (z, one).

    z is rescaled exactly onto [1/4, 1) through comparator banks against
    powers of four, a division-free Newton iteration computes 1/sqrt there,
    and the result z~ * u is scaled back exactly the same way.  Inputs
    below the window flush to zero.
    """
    key = (n, J, iters)
    if key in _SQRT_CACHE:
        return _SQRT_CACHE[key]
    mul = multiply_dnn(_acc(n, 2))
    p = _Pipe(["z", "one"], slot=False)
    p.step(
        _band_selectors(4, J, lambda j: {"z": 4.0 ** (-j - 1)}),
        keep=["z", "one"],
    )
    p.step([], keep=[("zr", _band_sum(J)), "z", "one"])
    p.step([], keep=["zr", "z", "one", ("u", {"one": 1.0})])
    for _ in range(iters):
        p.step([("uu", mul, [{"u": 1.0}, {"u": 1.0}])], keep=["zr", "z", "one", "u"])
        p.step([("zuu", mul, [{"zr": 1.0}, {"uu": 1.0}])], keep=["zr", "z", "one", "u"])
        p.step(
            [("u", mul, [{"u": 1.0}, {"one": 1.5, "zuu": -0.5}])],
            keep=["zr", "z", "one"],
        )
    p.step([("m", mul, [{"zr": 1.0}, {"u": 1.0}])], keep=["z", "one"])
    p.step(
        _band_selectors(4, J, lambda j: {"m": 2.0 ** (j + 1)}),
        keep=[],
    )
    net = p.finish([_band_sum(J)])
    _SQRT_CACHE[key] = net
    return net


_RECIP_CACHE = {}


def recip_dnn(n, J=13, iters=6):
    """1/z for z in [2^-J, 2^J), same exact-rescaling scheme in base 2."""
    key = (n, J, iters)
    if key in _RECIP_CACHE:
        return _RECIP_CACHE[key]
    mul = multiply_dnn(_acc(n, 2))
    p = _Pipe(["z", "one"], slot=False)
    p.step(
        _band_selectors(2, J, lambda j: {"z": 2.0 ** (-j - 1)}),
        keep=["z", "one"],
    )
    p.step([], keep=[("zr", _band_sum(J)), "z", "one"])
    p.step([], keep=["zr", "z", "one", ("u", {"one": 1.0})])
    for _ in range(iters):
        p.step([("zu", mul, [{"zr": 1.0}, {"u": 1.0}])], keep=["zr", "z", "one", "u"])
        p.step(
            [("u", mul, [{"u": 1.0}, {"one": 2.0, "zu": -1.0}])],
            keep=["zr", "z", "one"],
        )
    p.step(
        _band_selectors(2, J, lambda j: {"u": 2.0 ** (-j - 1)}),
        keep=[],
    )
    net = p.finish([_band_sum(J)])
    _RECIP_CACHE[key] = net
    return net


# estimator input layout (d = 2, p = 1): 27 channels per element
# [0:6)   self vertex coordinates (v0x, v0y, v1x, v1y, v2x, v2y)
# [6:12)  apex of the neighbor across edge k (k = 0, 1, 2); own vertex k when
#         the edge lies on the boundary
# [12:15) own polynomial coefficients (a, b, c) of U = a + b x + c y
# [15:24) neighbor coefficients, 3 per edge; own coefficients on the boundary
# [24:27) source coefficients (f, 0, 0)
EST_INPUT_SIZE = 27

_EDGE_VERTS = [(1, 2), (2, 0), (0, 1)]


def _node_names():
    return [f"v{i}{c}" for i in range(3) for c in ("x", "y")]


def _est_wires():
    names = _node_names()
    names += [f"a{i}{c}" for i in range(3) for c in ("x", "y")]
    names += ["ua", "ub", "uc"]
    for k in range(3):
        names += [f"na{k}", f"nb{k}", f"nc{k}"]
    names += ["f0", "f1", "f2"]
    return names


# data windows assumed by the estimator pipeline (desk-scale meshes of the
# supported domains): coordinates within [-2, 2], P1 gradients below 2^9,
# squared edge lengths within the 4^(+-J_EDGE) band, perimeters within
# 2^(+-J_PERIM)
COORD_EXP = 2
GRAD_EXP = 9
J_EDGE = 12
J_PERIM = 13


def _edge_pipeline(p, n):
    """Shared macro steps: per-edge lengths and gradient-jump terms.

    Consumes the standard wire names and leaves wires len{k}, term{k}
    (and diam, one, f0) in scope.
    """
    sq_c = square_dnn(_acc(n, COORD_EXP), _acc(n, COORD_EXP))
    sq_g = square_dnn(_acc(n, GRAD_EXP + 1), _acc(n, GRAD_EXP + 1))
    mul_t = multiply_dnn(_acc(n, 2 * GRAD_EXP + 2))
    ops = [("diam", build_diam(), [{nm: 1.0} for nm in _node_names()])]
    for k, (i, j) in enumerate(_EDGE_VERTS):
        ops.append((f"sdx{k}", sq_c, [{f"v{i}x": 1.0, f"v{j}x": -1.0}]))
        ops.append((f"sdy{k}", sq_c, [{f"v{i}y": 1.0, f"v{j}y": -1.0}]))
        ops.append((f"jb{k}", sq_g, [{"ub": 1.0, f"nb{k}": -1.0}]))
        ops.append((f"jc{k}", sq_g, [{"uc": 1.0, f"nc{k}": -1.0}]))
    p.step(ops, keep=["one", "f0"])
    root = sqrt_dnn(n, J=J_EDGE)
    ops = [
        (f"len{k}", root, [{f"sdx{k}": 1.0, f"sdy{k}": 1.0}, {"one": 1.0}])
        for k in range(3)
    ]
    p.step(ops, keep=["one", "f0", "diam"] + [f"jb{k}" for k in range(3)]
           + [f"jc{k}" for k in range(3)])
    ops = [
        (f"term{k}", mul_t, [{f"len{k}": 1.0}, {f"jb{k}": 1.0, f"jc{k}": 1.0}])
        for k in range(3)
    ]
    p.step(ops, keep=["one", "f0", "diam"] + [f"len{k}" for k in range(3)])


_EST_DNN_CACHE = {}


def estimator_dnn(n):
    """Per-element indicator network: diam^4 f^2 + diam^2 |dT|^-1 sum |e| j^2."""
    if n in _EST_DNN_CACHE:
        return _EST_DNN_CACHE[n]
    mul_c = multiply_dnn(_acc(n, 2 * COORD_EXP))
    mul_f = multiply_dnn(_acc(n, 2 * COORD_EXP + 3))
    mul_b = multiply_dnn(_acc(n, 2 * GRAD_EXP + 4))
    p = _Pipe(_est_wires(), slot=True)
    p.step([], keep=_node_names() + ["ub", "uc"]
           + [f"n{c}{k}" for k in range(3) for c in "bc"]
           + ["f0", ("one", {"slot": 1.0})])
    _edge_pipeline(p, n)
    p.step(
        [
            ("rp", recip_dnn(n, J=J_PERIM),
             [{"len0": 1.0, "len1": 1.0, "len2": 1.0}, {"one": 1.0}]),
            ("d2", mul_c, [{"diam": 1.0}, {"diam": 1.0}]),
            ("ff", mul_c, [{"f0": 1.0}, {"f0": 1.0}]),
        ],
        keep=["one"] + [f"term{k}" for k in range(3)],
    )
    p.step(
        [
            ("s1", mul_b, [{"term0": 1.0, "term1": 1.0, "term2": 1.0}, {"rp": 1.0}]),
            ("d4", mul_f, [{"d2": 1.0}, {"d2": 1.0}]),
        ],
        keep=["one", "d2", "ff"],
    )
    p.step(
        [
            ("edge", mul_b, [{"d2": 1.0}, {"s1": 1.0}]),
            ("vol", mul_f, [{"d4": 1.0}, {"ff": 1.0}]),
        ],
        keep=[],
    )
    p.step([("out", _relu1_dnn(), [{"edge": 1.0, "vol": 1.0}])], keep=[])
    net = p.finish([{"out": 1.0}])
    _EST_DNN_CACHE[n] = net
    return net


def build_estimator(n):
    """Indicator network as a recurrence-free basic RNN over element records."""
    return elementwise_stage(estimator_dnn(n), EST_INPUT_SIZE, 1)


# ---------------------------------------------------------------------------
# estimator input encoding


def _poly_coeffs(mesh, U):
    """Monomial coefficients (a, b, c) of U = a + b x + c y per element."""
    gx, gy = fem.element_gradients(mesh, U)
    tris = mesh.triangles
    p0 = mesh.vertices[tris[:, 0]]
    u0 = U.coefficients[tris[:, 0]]
    a = u0 - gx * p0[:, 0] - gy * p0[:, 1]
    return a, gx, gy


def encode_estimator_inputs(mesh, U, f):
    """(N, 27) input records for the estimator network."""
    N = mesh.n_elements
    out = np.zeros((N, EST_INPUT_SIZE))
    coords = mesh.element_coords()
    out[:, 0:6] = coords.reshape(N, 6)
    a, b, c = _poly_coeffs(mesh, U)
    out[:, 12] = a
    out[:, 13] = b
    out[:, 14] = c
    fe = fem.source_per_element(mesh, f)
    out[:, 24] = fe
    e2e = mesh.edge_to_elements()
    tris = mesh.triangles
    for t in range(N):
        for k in range(3):
            i, j = _EDGE_VERTS[k]
            vi, vj = tris[t, i], tris[t, j]
            key = (vi, vj) if vi < vj else (vj, vi)
            nbr = next((o for o in e2e[key] if o != t), -1)
            if nbr < 0:
                out[t, 6 + 2 * k : 8 + 2 * k] = coords[t, k]
                out[t, 15 + 3 * k : 18 + 3 * k] = out[t, 12:15]
            else:
                apex = set(tris[nbr]) - {vi, vj}
                out[t, 6 + 2 * k : 8 + 2 * k] = mesh.vertices[apex.pop()]
                out[t, 15 + 3 * k] = a[nbr]
                out[t, 16 + 3 * k] = b[nbr]
                out[t, 17 + 3 * k] = c[nbr]
    return out


def encode_vol_input(mesh, U, f, eid):
    """12-channel record (nodes, U coefficients, f coefficients)."""
    full = encode_estimator_inputs(mesh, U, f)[eid]
    return np.concatenate([full[0:6], full[12:15], full[24:27]])


def encode_jump_input(mesh, U, eid):
    """24-channel record (nodes, neighbor apexes, own and neighbor U)."""
    full = encode_estimator_inputs(mesh, U, 0.0)[eid]
    return np.concatenate([full[0:6], full[6:12], full[12:15], full[15:24]])


# ---------------------------------------------------------------------------
# VOL / JUMP deep RNNs (impulse input, result held at the last position)


def hold_stage(net, in_size):
    """Stage that latches the impulse input and applies `net` every step."""
    slot = net.constant_input_slot
    s_out = in_size + net.output_size
    combos = [{m: 1.0, in_size + m: 1.0} for m in range(in_size)]
    if slot:
        combos.append({"slot": 1.0})
    subs = [(net, combos)]
    carries = [{m: 1.0, in_size + m: 1.0} for m in range(in_size)]
    outs = [{("c", m): 1.0} for m in range(in_size)]
    outs += [{("s", 0, k): 1.0} for k in range(net.output_size)]
    return make_step(in_size, s_out, subs, carries, outs, slot=slot)


def _select_stage(s, idx):
    row = np.zeros((1, s))
    row[0, idx] = 1.0
    return elementwise_stage(rc.matrix_dnn(row), s, 1)


def vol_dnn(n):
    """diam^d |T|^-1 ||f + Lap U||^2 over (nodes, U coeffs, f coeffs).

    For p = 1 the Laplacian of U vanishes identically, so the polynomial
    algebra collapses to diam^2 f^2.
    """
    names = _node_names() + ["ua", "ub", "uc", "f0", "f1", "f2"]
    sq = square_dnn(_cap_inner(n), _cap_inner(n))
    mul = multiply_dnn(_cap_outer(n))
    p = _Pipe(names, slot=True)
    p.step(
        [("diam", build_diam(), [{nm: 1.0} for nm in _node_names()]),
         ("ff", sq, [{"f0": 1.0}, {"slot": 1.0}])],
        keep=[("one", {"slot": 1.0})],
    )
    p.step([("d2", mul, [{"diam": 1.0}, {"diam": 1.0}])], keep=["ff"])
    p.step([("out", mul, [{"d2": 1.0}, {"ff": 1.0}])], keep=[])
    return p.finish([{"out": 1.0}])


def jump_dnn(n, J_edge=14, J_perim=13):
    """diam^(d-1) |dT|^-1 ||[grad U]||^2 over (nodes, apexes, own U, nbr U)."""
    names = _node_names()
    names += [f"a{i}{c}" for i in range(3) for c in ("x", "y")]
    names += ["ua", "ub", "uc"]
    for k in range(3):
        names += [f"na{k}", f"nb{k}", f"nc{k}"]
    mul = multiply_dnn(_cap_outer(n))
    p = _Pipe(names, slot=True)
    p.step([], keep=_node_names() + ["ub", "uc"]
           + [f"n{c}{k}" for k in range(3) for c in "bc"]
           + [("f0", {}), ("one", {"slot": 1.0})])
    _edge_pipeline(p, n, J_edge)
    p.step(
        [("rp", recip_dnn(n, J=J_perim),
          [{"len0": 1.0, "len1": 1.0, "len2": 1.0}, {"one": 1.0}])],
        keep=["diam"] + [f"term{k}" for k in range(3)],
    )
    p.step(
        [("s1", mul, [{"term0": 1.0, "term1": 1.0, "term2": 1.0}, {"rp": 1.0}])],
        keep=["diam"],
    )
    p.step([("out", mul, [{"diam": 1.0}, {"s1": 1.0}])], keep=[])
    return p.finish([{"out": 1.0}])


def build_vol(n):
    core = vol_dnn(n)
    stage = hold_stage(core, 12)
    return rc.DeepRnn(
        stages=(stage, _select_stage(13, 12)), wiring=(rc.PLAIN, rc.PLAIN)
    )


def build_jump(n, J_edge=14, J_perim=13):
    core = jump_dnn(n, J_edge, J_perim)
    stage = hold_stage(core, 24)
    return rc.DeepRnn(
        stages=(stage, _select_stage(25, 24)), wiring=(rc.PLAIN, rc.PLAIN)
    )

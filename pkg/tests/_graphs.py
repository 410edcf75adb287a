"""Random small computation graphs used for finite-difference sweeps.

A generated program consumes a single flat float vector, slices it into the
leaf tensors inside the graph (so every leaf coordinate receives gradient),
chains a few randomly chosen motifs over a (2,3) "bus" tensor, and reduces
to a scalar. Motifs that contain kinks (relu, max, max-pool) are only
accepted when the sampled point keeps a safe margin from the kink, so the
central difference is well defined.
"""

from __future__ import annotations

import numpy as np

from ibrobust import tensor as T

BUS_SHAPE = (2, 3)
_MARGIN = 0.05


class Program:
    def __init__(self):
        self.leaf_shapes: list[tuple[int, ...]] = []
        self.steps: list[tuple] = []  # ("op", op_kind, input_slots, params) etc.
        self.point: np.ndarray | None = None

    @property
    def flat_size(self) -> int:
        return int(sum(np.prod(s) for s in self.leaf_shapes))


def _leaf(prog: Program, values: list[np.ndarray], rng, shape) -> int:
    data = rng.uniform(-1.5, 1.5, size=shape)
    prog.leaf_shapes.append(tuple(shape))
    prog.steps.append(("leaf", len(prog.leaf_shapes) - 1, tuple(shape)))
    values.append(data)
    return len(values) - 1


def _const(prog: Program, values: list[np.ndarray], data) -> int:
    arr = np.asarray(data, dtype=np.float64)
    prog.steps.append(("const", arr))
    values.append(arr)
    return len(values) - 1


def _op(prog: Program, values: list[np.ndarray], op_kind: str, slots, params=None) -> int:
    params = params or {}
    prog.steps.append(("op", op_kind, tuple(slots), params))
    # mirror the forward computation in numpy to track concrete values
    tape = T.Tape(np.float64, check_finite=True)
    tensors = [tape.constant(values[s]) for s in slots]
    out = T.forward(tape, op_kind, tensors, params)
    values.append(out.data)
    return len(values) - 1


def build_random_program(rng: np.random.Generator, n_motifs: int = 5) -> Program:
    prog = Program()
    values: list[np.ndarray] = []
    bus = _leaf(prog, values, rng, BUS_SHAPE)

    def motif_affine():
        nonlocal bus
        w = _leaf(prog, values, rng, (3, 3))
        bus = _op(prog, values, "matmul", [bus, w])
        bus = _op(prog, values, "tanh", [bus])

    def motif_gate():
        nonlocal bus
        g = _leaf(prog, values, rng, BUS_SHAPE)
        s = _op(prog, values, "sigmoid", [g])
        bus = _op(prog, values, "mul", [bus, s])

    def motif_log():
        nonlocal bus
        sp = _op(prog, values, "softplus", [bus])
        c = _const(prog, values, 0.2)
        shifted = _op(prog, values, "add", [sp, c])
        bus = _op(prog, values, "log", [shifted])

    def motif_sqrt():
        nonlocal bus
        sp = _op(prog, values, "softplus", [bus])
        c = _const(prog, values, 0.2)
        shifted = _op(prog, values, "add", [sp, c])
        bus = _op(prog, values, "sqrt", [shifted])

    def motif_power():
        nonlocal bus
        sp = _op(prog, values, "softplus", [bus])
        c = _const(prog, values, 0.2)
        shifted = _op(prog, values, "add", [sp, c])
        bus = _op(prog, values, "power", [shifted], {"p": 1.5})

    def motif_div():
        nonlocal bus
        sq = _op(prog, values, "square", [bus])
        c = _const(prog, values, 0.5)
        den = _op(prog, values, "add", [sq, c])
        bus = _op(prog, values, "div", [bus, den])

    def motif_relu() -> bool:
        nonlocal bus
        for _ in range(20):
            shift = rng.uniform(-0.8, 0.8)
            if np.all(np.abs(values[bus] + shift) > _MARGIN):
                c = _const(prog, values, shift)
                moved = _op(prog, values, "add", [bus, c])
                bus = _op(prog, values, "relu", [moved])
                return True
        return False

    def motif_max() -> bool:
        nonlocal bus
        v = values[bus]
        top2 = np.sort(v, axis=1)[:, -2:]
        if np.any(top2[:, 1] - top2[:, 0] < _MARGIN):
            return False
        m = _op(prog, values, "max", [bus], {"axis": 1, "keepdims": True})
        bus = _op(prog, values, "sub", [bus, m])
        return True

    def motif_softmax():
        nonlocal bus
        sm = _op(prog, values, "softmax", [bus], {"axis": 1})
        c = _const(prog, values, 3.0)
        bus = _op(prog, values, "mul", [sm, c])

    def motif_lse():
        nonlocal bus
        lse = _op(prog, values, "logsumexp", [bus], {"axis": 0, "keepdims": True})
        bus = _op(prog, values, "sub", [bus, lse])

    def motif_slice_concat():
        nonlocal bus
        top = _op(prog, values, "slice", [bus], {"slices": (slice(0, 1), slice(None))})
        bot = _op(prog, values, "slice", [bus], {"slices": (slice(1, 2), slice(None))})
        neg = _op(prog, values, "neg", [bot])
        bus = _op(prog, values, "concat", [top, neg], {"axis": 0})

    def motif_reshape():
        nonlocal bus
        flat = _op(prog, values, "reshape", [bus], {"shape": (3, 2)})
        bus = _op(prog, values, "reshape", [flat], {"shape": BUS_SHAPE})

    def motif_broadcast():
        nonlocal bus
        row = _leaf(prog, values, rng, (1, 3))
        col = _leaf(prog, values, rng, (2, 1))
        d = _op(prog, values, "sub", [bus, row])
        bus = _op(prog, values, "mul", [d, col])
        bus = _op(prog, values, "tanh", [bus])

    def motif_conv():
        nonlocal bus
        x = _leaf(prog, values, rng, (1, 2, 4, 4))
        w = _leaf(prog, values, rng, (2, 2, 2, 2))
        pad = int(rng.integers(0, 2))
        c = _op(prog, values, "conv2d", [x, w], {"stride": 1, "padding": pad})
        t = _op(prog, values, "tanh", [c])
        m = _op(prog, values, "mean", [t])
        bus = _op(prog, values, "add", [bus, m])

    def motif_conv_transpose():
        nonlocal bus
        x = _leaf(prog, values, rng, (1, 2, 3, 3))
        w = _leaf(prog, values, rng, (2, 2, 2, 2))
        stride = int(rng.integers(1, 3))
        c = _op(prog, values, "conv2d_transpose", [x, w], {"stride": stride, "padding": 0})
        t = _op(prog, values, "tanh", [c])
        m = _op(prog, values, "mean", [t])
        bus = _op(prog, values, "add", [bus, m])

    def motif_pool() -> bool:
        nonlocal bus
        for _ in range(20):
            data = rng.uniform(-1.5, 1.5, size=(1, 1, 4, 4))
            wins = data.reshape(1, 1, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
            gaps = np.sort(wins, axis=1)[:, -1] - np.sort(wins, axis=1)[:, -2]
            if np.all(gaps > _MARGIN):
                prog.leaf_shapes.append((1, 1, 4, 4))
                prog.steps.append(("leaf", len(prog.leaf_shapes) - 1, (1, 1, 4, 4)))
                values.append(data)
                x = len(values) - 1
                p = _op(prog, values, "max_pool2d", [x])
                s = _op(prog, values, "sum", [p])
                c = _const(prog, values, 0.1)
                scaled = _op(prog, values, "mul", [s, c])
                bus = _op(prog, values, "add", [bus, scaled])
                return True
        return False

    motifs = [
        motif_affine, motif_gate, motif_log, motif_sqrt, motif_power, motif_div,
        motif_relu, motif_max, motif_softmax, motif_lse, motif_slice_concat,
        motif_reshape, motif_broadcast, motif_conv, motif_conv_transpose, motif_pool,
    ]
    applied = 0
    guard = 0
    while applied < n_motifs and guard < 50:
        guard += 1
        m = motifs[int(rng.integers(0, len(motifs)))]
        ok = m()
        if ok is not False:
            applied += 1

    sq = _op(prog, values, "square", [bus])
    _op(prog, values, "mean", [sq])
    leaf_values = [values[i] for i, step in enumerate(prog.steps) if step[0] == "leaf"]
    prog.point = np.concatenate([v.reshape(-1) for v in leaf_values])
    return prog


def eval_program(prog: Program, flat: T.Tensor) -> T.Tensor:
    """Execute the program on the tape of ``flat``, slicing leaves out of it."""
    tape = flat.tape
    values: list[T.Tensor] = []
    offset = 0
    for step in prog.steps:
        if step[0] == "leaf":
            shape = step[2]
            n = int(np.prod(shape))
            piece = T.slice_(flat, (slice(offset, offset + n),))
            values.append(T.reshape(piece, shape))
            offset += n
        elif step[0] == "const":
            values.append(tape.constant(step[1]))
        else:
            _, op_kind, slots, params = step
            values.append(T.forward(tape, op_kind, [values[s] for s in slots], params))
    return values[-1]


def check_program(prog: Program, step: float = 1e-5, tolerance: float = 1e-5) -> T.CheckReport:
    return T.finite_diff_check(
        lambda flat: eval_program(prog, flat),
        prog.point,
        step=step,
        tolerance=tolerance,
    )

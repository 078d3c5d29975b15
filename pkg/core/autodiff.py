"""
Reverse-mode differentiation over a recorded list of elementary operations.

A GradientRecord is an append-only tape. Every DiffNode points at one slot
of it. Values are either a single real or a lane: a 1-D array holding one
independent real per chain, so N scalar records can be evaluated together.
All operations are elementwise; ``lane_mean`` is the only op that mixes lanes.

The generic helpers at the bottom (exp, log, gated_select, ...) accept plain
floats, numpy arrays or DiffNodes, so the same target/leapfrog code runs in
sampling mode and in differentiable mode.
"""

import numpy as np

from core.errors import NumericalFailure

# opcodes
INPUT = "input"
CONST = "const"
ADD = "add"
SUB = "sub"
MUL = "mul"
DIV = "div"
NEG = "neg"
EXP = "exp"
LOG = "log"
POW = "pow"
SELECT = "select"
STOP = "stop"
LANE_MEAN = "lane_mean"


def _is_finite(value):
    return bool(np.all(np.isfinite(value)))


class GradientRecord:
    """Ordered list of recorded operations plus the input registry."""

    def __init__(self):
        self.opcodes = []
        self.parents = []
        self.payloads = []
        self.values = []
        self.input_indices = []

    def __len__(self):
        return len(self.values)

    def _push(self, opcode, value, parents=(), payload=None):
        index = len(self.values)
        self.opcodes.append(opcode)
        self.parents.append(parents)
        self.payloads.append(payload)
        self.values.append(value)
        return DiffNode(value, self, index)

    def input(self, value):
        node = self._push(INPUT, value)
        self.input_indices.append(node.index)
        return node

    def inputs(self, values):
        return [self.input(float(v)) for v in np.asarray(values, dtype=np.float64)]

    def constant(self, value):
        return self._push(CONST, value, payload=value)

    def lift(self, value):
        if isinstance(value, DiffNode):
            if value.record is not self:
                raise ValueError("cannot mix nodes from different gradient records")
            return value
        return self.constant(value)

    # -- backward -----------------------------------------------------------

    def _accumulate(self, adjoints, index, contribution):
        # an input holding a single real that fed laned ops gets the lane sum
        if np.ndim(self.values[index]) == 0 and np.ndim(contribution) > 0:
            contribution = contribution.sum()
        current = adjoints[index]
        adjoints[index] = contribution if current is None else current + contribution

    def backward(self, output, seed=1.0):
        """Accumulate adjoints of ``output`` into every slot, in reverse order."""
        adjoints = [None] * len(self.values)
        if np.ndim(output.value) > 0:
            adjoints[output.index] = np.full(np.shape(output.value), seed, dtype=np.float64)
        else:
            adjoints[output.index] = seed

        values = self.values
        for i in range(output.index, -1, -1):
            g = adjoints[i]
            if g is None:
                continue
            op = self.opcodes[i]
            if op in (INPUT, CONST, STOP):
                continue
            ps = self.parents[i]
            payload = self.payloads[i]

            if op == ADD:
                for p in ps:
                    self._accumulate(adjoints, p, g)
            elif op == SUB:
                self._accumulate(adjoints, ps[0], g)
                self._accumulate(adjoints, ps[1], -g)
            elif op == MUL:
                if len(ps) == 2:
                    a, b = ps
                    self._accumulate(adjoints, a, g * values[b])
                    self._accumulate(adjoints, b, g * values[a])
                else:
                    self._accumulate(adjoints, ps[0], g * payload)
            elif op == DIV:
                a, b = ps
                self._accumulate(adjoints, a, g / values[b])
                self._accumulate(adjoints, b, -g * values[i] / values[b])
            elif op == NEG:
                self._accumulate(adjoints, ps[0], -g)
            elif op == EXP:
                self._accumulate(adjoints, ps[0], g * values[i])
            elif op == LOG:
                self._accumulate(adjoints, ps[0], g / values[ps[0]])
            elif op == POW:
                base = values[ps[0]]
                self._accumulate(adjoints, ps[0], g * payload * np.power(base, payload - 1.0))
            elif op == SELECT:
                a, b = ps
                if np.ndim(payload) == 0:
                    self._accumulate(adjoints, a if payload else b, g)
                else:
                    zero = np.zeros_like(g)
                    self._accumulate(adjoints, a, np.where(payload, g, zero))
                    self._accumulate(adjoints, b, np.where(payload, zero, g))
            elif op == LANE_MEAN:
                lanes = np.shape(values[ps[0]])[0]
                self._accumulate(adjoints, ps[0], np.full(lanes, g / lanes))
            else:
                raise ValueError(f"unknown opcode {op!r} at {i}")
        return adjoints

    def _first_non_finite(self, upto):
        for i in range(upto + 1):
            if not _is_finite(self.values[i]):
                return i
        return None

    def gradient(self, output, wrt=None):
        """Gradient of a single-real ``output`` w.r.t. ``wrt`` (default: all inputs).

        Raises NumericalFailure with the offending operation index when a value
        or an adjoint is not finite.
        """
        if np.ndim(output.value) != 0:
            raise ValueError("gradient requires a single-real output; reduce lanes with lane_mean")
        if not _is_finite(output.value):
            bad = self._first_non_finite(output.index)
            raise NumericalFailure(f"non-finite value at operation {bad}", op_index=bad)
        adjoints = self.backward(output)
        indices = self.input_indices if wrt is None else [n.index for n in wrt]
        grad = np.zeros(len(indices), dtype=np.float64)
        for k, idx in enumerate(indices):
            a = adjoints[idx]
            if a is None:
                continue
            if not _is_finite(a):
                raise NumericalFailure(f"non-finite adjoint at operation {idx}", op_index=idx)
            grad[k] = float(np.sum(a))
        return grad

    # -- replay -------------------------------------------------------------

    def replay(self, input_values=None):
        """Recompute every slot from the inputs, following the recording order."""
        if input_values is None:
            input_values = [self.values[i] for i in self.input_indices]
        input_iter = iter(input_values)
        out = []
        for i, op in enumerate(self.opcodes):
            ps = self.parents[i]
            payload = self.payloads[i]
            if op == INPUT:
                v = next(input_iter)
            elif op == CONST:
                v = payload
            elif op == ADD:
                v = out[ps[0]] + out[ps[1]] if len(ps) == 2 else out[ps[0]] + payload
            elif op == SUB:
                v = out[ps[0]] - out[ps[1]]
            elif op == MUL:
                v = out[ps[0]] * out[ps[1]] if len(ps) == 2 else out[ps[0]] * payload
            elif op == DIV:
                v = out[ps[0]] / out[ps[1]]
            elif op == NEG:
                v = -out[ps[0]]
            elif op == EXP:
                v = np.exp(out[ps[0]])
            elif op == LOG:
                v = np.log(out[ps[0]])
            elif op == POW:
                v = np.power(out[ps[0]], payload)
            elif op == SELECT:
                a, b = out[ps[0]], out[ps[1]]
                v = (a if payload else b) if np.ndim(payload) == 0 else np.where(payload, a, b)
            elif op == STOP:
                v = out[ps[0]]
            elif op == LANE_MEAN:
                v = float(np.mean(out[ps[0]]))
            else:
                raise ValueError(f"unknown opcode {op!r} at {i}")
            out.append(v)
        return out


class DiffNode:
    """A recorded value. Arithmetic on nodes appends to the owning record."""

    __slots__ = ("value", "record", "index")

    # numpy defers to the reflected operators instead of broadcasting over us
    __array_ufunc__ = None

    def __init__(self, value, record, index):
        self.value = value
        self.record = record
        self.index = index

    def __repr__(self):
        return f"DiffNode(value={self.value}, op={self.record.opcodes[self.index]}, index={self.index})"

    def _other(self, other):
        if isinstance(other, DiffNode) and other.record is not self.record:
            raise ValueError("cannot mix nodes from different gradient records")
        return other

    def __add__(self, other):
        other = self._other(other)
        if isinstance(other, DiffNode):
            return self.record._push(ADD, self.value + other.value, (self.index, other.index))
        return self.record._push(ADD, self.value + other, (self.index,), other)

    __radd__ = __add__

    def __sub__(self, other):
        other = self.record.lift(self._other(other))
        return self.record._push(SUB, self.value - other.value, (self.index, other.index))

    def __rsub__(self, other):
        other = self.record.lift(other)
        return self.record._push(SUB, other.value - self.value, (other.index, self.index))

    def __mul__(self, other):
        other = self._other(other)
        if isinstance(other, DiffNode):
            return self.record._push(MUL, self.value * other.value, (self.index, other.index))
        return self.record._push(MUL, self.value * other, (self.index,), other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self.record.lift(self._other(other))
        return self.record._push(DIV, self.value / other.value, (self.index, other.index))

    def __rtruediv__(self, other):
        other = self.record.lift(other)
        return self.record._push(DIV, other.value / self.value, (other.index, self.index))

    def __neg__(self):
        return self.record._push(NEG, -self.value, (self.index,))

    def __pow__(self, exponent):
        if isinstance(exponent, DiffNode):
            raise TypeError("only constant exponents are supported")
        return self.record._push(POW, np.power(self.value, exponent), (self.index,), float(exponent))


# -- generic elementary functions ----------------------------------------------


def is_node(x):
    return isinstance(x, DiffNode)


def value_of(x):
    """Plain value of a node; plain inputs pass through."""
    return x.value if isinstance(x, DiffNode) else x


def exp(x):
    if isinstance(x, DiffNode):
        return x.record._push(EXP, np.exp(x.value), (x.index,))
    return np.exp(x)


def log(x):
    if isinstance(x, DiffNode):
        return x.record._push(LOG, np.log(x.value), (x.index,))
    return np.log(x)


def sqrt(x):
    if isinstance(x, DiffNode):
        return x ** 0.5
    return np.sqrt(x)


def square(x):
    return x * x


def stop_gradient(x):
    """Same value, zero adjoint flow through the returned node."""
    if isinstance(x, DiffNode):
        return x.record._push(STOP, x.value, (x.index,))
    return x


def gated_select(condition, a, b):
    """``a`` where condition holds, else ``b``; the condition is not differentiated.

    ``condition`` is a bool or, for laned values, a boolean array.
    """
    condition = np.asarray(condition, dtype=bool)
    if np.ndim(condition) == 0:
        condition = bool(condition)
    record = a.record if isinstance(a, DiffNode) else b.record if isinstance(b, DiffNode) else None
    if record is None:
        if isinstance(condition, bool):
            return a if condition else b
        return np.where(condition, a, b)
    a = record.lift(a)
    b = record.lift(b)
    if isinstance(condition, bool):
        value = a.value if condition else b.value
    else:
        value = np.where(condition, a.value, b.value)
    return record._push(SELECT, value, (a.index, b.index), condition)


def lane_mean(x):
    """Mean over lanes: the Monte Carlo average of independent chains."""
    if isinstance(x, DiffNode):
        if np.ndim(x.value) == 0:
            return x
        return x.record._push(LANE_MEAN, float(np.mean(x.value)), (x.index,))
    return float(np.mean(x))


def logsumexp(terms):
    """log Σ exp(terms) with the usual max shift; the shift is taken from values."""
    shift = value_of(terms[0])
    for t in terms[1:]:
        shift = np.maximum(shift, value_of(t))
    total = exp(terms[0] - shift)
    for t in terms[1:]:
        total = total + exp(t - shift)
    return log(total) + shift


def evaluate_with_gradient(builder, inputs):
    """Evaluate ``builder`` on recorded inputs and return (value, gradient).

    ``builder`` receives a list of DiffNodes and must return a single-real
    node (or a plain number, whose gradient is zero).
    """
    record = GradientRecord()
    nodes = record.inputs(inputs)
    output = builder(nodes)
    if not isinstance(output, DiffNode):
        value = float(output)
        if not np.isfinite(value):
            raise NumericalFailure("non-finite value of a constant expression")
        return value, np.zeros(len(nodes))
    gradient = record.gradient(output)
    return float(output.value), gradient

"""Model functions mapping an ``(n, d)`` input batch to ``n`` outputs."""
from __future__ import annotations

import ast
import math
import re
import subprocess

import numpy as np


class ModelError(ValueError):
    """Invalid model definition."""


class ModelEvaluationError(RuntimeError):
    """A model failed on a batch; ``row`` holds the offending input when known."""

    def __init__(self, message, row=None, line=None):
        super().__init__(message)
        self.row = row
        self.line = line


FLOOD_INPUTS = ("Q", "Ks", "Zv", "Zm", "Hd", "Cb", "B", "L")


def eval_flood(Q, Ks, Zv, Zm, Hd, Cb, B, L):
    """Overflow margin ``S = Hd + Cb - Zv - H`` of a river dyke.

    ``H = (Q / (B * Ks * sqrt((Zm - Zv) / L))) ** 0.6`` is the water height.
    A negative ``S`` means the dyke overflows. Arguments broadcast.
    """
    Q, Ks, Zv, Zm, Hd, Cb, B, L = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (Q, Ks, Zv, Zm, Hd, Cb, B, L)))
    for name, val in (("Ks", Ks), ("B", B), ("L", L)):
        if np.any(~(val > 0)):
            raise ModelEvaluationError(f"flood model requires {name} > 0")
    if np.any(~(Zm > Zv)):
        raise ModelEvaluationError("flood model requires Zm > Zv")
    if np.any(Q < 0):
        raise ModelEvaluationError("flood model requires Q >= 0")
    H = (Q / (B * Ks * np.sqrt((Zm - Zv) / L))) ** 0.6
    return Hd + Cb - Zv - H


def eval_polynomial(x1, x2):
    """``0.58 x1^2 x2^2 - x1 x2 - x1 - x2``."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return 0.58 * x1**2 * x2**2 - x1 * x2 - x1 - x2


def eval_weighted_sum(x, beta, sign=-1.0):
    """``sign * sum_j beta_j x_j`` over the last axis of ``x``."""
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if x.shape[-1] != beta.size:
        raise ModelEvaluationError(f"weighted sum expects {beta.size} inputs, got {x.shape[-1]}")
    return sign * (x @ beta)


def geometric_weights(d):
    """Weights ``10**(j/d)`` for ``j = 1..d``."""
    return 10.0 ** (np.arange(1, d + 1) / d)


# --------------------------------------------------------------------------
# expressions

_FUNCS = {
    "sqrt": np.sqrt,
    "exp": np.exp,
    "log": np.log,
    "abs": np.abs,
}
_VAR = re.compile(r"x([1-9][0-9]*)$")


class Expression:
    """Arithmetic expression over ``x1 .. xd``.

    Supports ``+ - * /``, power written ``^`` or ``**``, unary signs, numeric
    literals and the functions ``sqrt``, ``exp``, ``log``, ``abs``, ``min``
    and ``max``.

    Examples
    --------
    >>> Expression("x1 + x2")(np.array([[1.0, 2.0]]))
    array([3.])
    """

    def __init__(self, text):
        self.text = text
        src = text.replace("^", "**")
        try:
            tree = ast.parse(src, mode="eval")
        except SyntaxError as exc:
            col = _orig_column(text, (exc.offset or 1) - 1)
            raise ModelError(f"cannot parse expression at position {col + 1}: {exc.msg}\n  {text}\n  {' ' * col}^") from None
        self.tree = tree.body
        self.variables = set()
        self._validate(self.tree)
        self.dimension = max(self.variables, default=0)

    def _validate(self, node):
        if isinstance(node, ast.BinOp):
            if not isinstance(node.op, (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)):
                self._reject(node, "operator")
            self._validate(node.left)
            self._validate(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.UAdd, ast.USub)):
                self._reject(node, "operator")
            self._validate(node.operand)
        elif isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                self._reject(node, "literal")
        elif isinstance(node, ast.Name):
            m = _VAR.match(node.id)
            if not m:
                self._reject(node, f"name {node.id!r}")
            self.variables.add(int(m.group(1)))
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.keywords:
                self._reject(node, "call")
            name = node.func.id
            if name in _FUNCS:
                if len(node.args) != 1:
                    self._reject(node, f"{name} takes one argument")
            elif name in ("min", "max"):
                if len(node.args) < 2:
                    self._reject(node, f"{name} takes at least two arguments")
            else:
                self._reject(node, f"function {name!r}")
            for a in node.args:
                self._validate(a)
        else:
            self._reject(node, "syntax")

    def _reject(self, node, what):
        col = _orig_column(self.text, getattr(node, "col_offset", 0))
        raise ModelError(f"unsupported {what} at position {col + 1} in expression {self.text!r}")

    def _eval(self, node, cols):
        if isinstance(node, ast.BinOp):
            a, b = self._eval(node.left, cols), self._eval(node.right, cols)
            op = type(node.op)
            if op is ast.Add:
                return a + b
            if op is ast.Sub:
                return a - b
            if op is ast.Mult:
                return a * b
            if op is ast.Div:
                return a / b
            return a ** b
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, cols)
            return -v if isinstance(node.op, ast.USub) else +v
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return cols[int(node.id[1:]) - 1]
        args = [self._eval(a, cols) for a in node.args]
        name = node.func.id
        if name == "min":
            return _reduce(np.minimum, args)
        if name == "max":
            return _reduce(np.maximum, args)
        return _FUNCS[name](args[0])

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] < self.dimension:
            raise ModelEvaluationError(f"expression needs at least {self.dimension} input columns")
        cols = [x[:, k] for k in range(x.shape[1])]
        with np.errstate(all="ignore"):
            y = np.broadcast_to(np.asarray(self._eval(self.tree, cols), dtype=float), (x.shape[0],)).copy()
        bad = ~np.isfinite(y) & np.all(np.isfinite(x), axis=1)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise ModelEvaluationError(
                f"expression {self.text!r} is undefined at input row {k}: {x[k].tolist()}", row=x[k].tolist())
        return y


def _reduce(f, args):
    out = args[0]
    for a in args[1:]:
        out = f(out, a)
    return out


def _orig_column(text, col):
    # map a column in the '^'->'**' rewritten text back to the original
    shift = 0
    pos = 0
    for ch in text:
        if pos + shift >= col:
            break
        if ch == "^":
            shift += 1
        pos += 1
    return max(min(pos, len(text)), 0)


# --------------------------------------------------------------------------
# external executables


def format_float(v):
    """Shortest decimal that round-trips to the same double."""
    return repr(float(v))


def eval_external(command, x, batch_size=10_000, timeout=None):
    """Evaluate a model run as a child process.

    Each batch is written as comma separated rows to the child's stdin and
    exactly one value per row is read back from its stdout.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    out = np.empty(n)
    if n == 0:
        return out
    for start in range(0, n, batch_size):
        chunk = x[start:start + batch_size]
        payload = "".join(",".join(format_float(v) for v in row) + "\n" for row in chunk)
        try:
            proc = subprocess.run(command, input=payload.encode("utf-8"), capture_output=True, timeout=timeout)
        except subprocess.TimeoutExpired:
            raise ModelEvaluationError(f"external model timed out after {timeout} s on rows {start}..{start + len(chunk) - 1}") from None
        except OSError as exc:
            raise ModelEvaluationError(f"cannot start external model {command!r}: {exc}") from None
        if proc.returncode != 0:
            err = proc.stderr.decode("utf-8", "replace").strip()
            raise ModelEvaluationError(f"external model exited with status {proc.returncode}: {err}")
        lines = proc.stdout.decode("utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if len(lines) != len(chunk):
            raise ModelEvaluationError(f"external model returned {len(lines)} lines for {len(chunk)} input rows")
        for k, line in enumerate(lines):
            try:
                out[start + k] = float(line.strip())
            except ValueError:
                raise ModelEvaluationError(
                    f"malformed output at line {k + 1}: {line!r}", row=chunk[k].tolist(), line=k + 1) from None
    return out


# --------------------------------------------------------------------------


class Model:
    """Callable model built from a configuration mapping.

    Parameters
    ----------
    spec : dict
        ``{"kind": "builtin", "name": ..., ...}``,
        ``{"kind": "expression", "expression": ...}`` or
        ``{"kind": "external", "command": [...], "batch_size": ..., "timeout": ...}``.
    d : int
        Input dimension.
    """

    def __init__(self, spec, d):
        self.spec = dict(spec)
        self.d = int(d)
        kind = spec.get("kind")
        if kind == "builtin":
            self._fn = self._builtin(spec)
        elif kind == "expression":
            expr = Expression(spec["expression"])
            if expr.dimension > self.d:
                raise ModelError(f"expression references x{expr.dimension} but only {self.d} inputs are declared")
            self._fn = expr
        elif kind == "external":
            cmd = spec["command"]
            if isinstance(cmd, str) or not cmd:
                raise ModelError("external command must be a non-empty list of arguments")
            bs = int(spec.get("batch_size", 10_000))
            to = spec.get("timeout")
            self._fn = lambda x: eval_external(cmd, x, bs, to)
        else:
            raise ModelError(f"unknown model kind {kind!r}")

    def _builtin(self, spec):
        name = spec.get("name")
        d = self.d
        if name == "polynomial":
            if d != 2:
                raise ModelError("the polynomial model takes 2 inputs")
            return lambda x: eval_polynomial(x[:, 0], x[:, 1])
        if name == "weighted_sum":
            w = spec.get("weights", "geometric")
            w = geometric_weights(d) if w == "geometric" else np.asarray(w, dtype=float)
            if w.size != d:
                raise ModelError(f"weighted_sum has {w.size} weights for {d} inputs")
            sign = float(spec.get("sign", -1))
            return lambda x: eval_weighted_sum(x, w, sign)
        if name == "flood":
            variables = list(spec.get("variables", ["Q", "Ks"]))
            consts = dict(spec.get("constants", {}))
            unknown = (set(variables) | set(consts)) - set(FLOOD_INPUTS)
            if unknown:
                raise ModelError(f"unknown flood inputs {sorted(unknown)}")
            if len(variables) != d:
                raise ModelError(f"flood model declares {len(variables)} random inputs but {d} margins are given")
            missing = set(FLOOD_INPUTS) - set(variables) - set(consts)
            if missing:
                raise ModelError(f"flood inputs {sorted(missing)} are neither random nor fixed")
            pos = {v: k for k, v in enumerate(variables)}

            def flood(x):
                args = [x[:, pos[v]] if v in pos else consts[v] for v in FLOOD_INPUTS]
                return eval_flood(*args)

            return flood
        raise ModelError(f"unknown builtin model {name!r}")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ModelEvaluationError(f"model expects an (n, {self.d}) batch")
        y = np.asarray(self._fn(x), dtype=float)
        if y.shape != (x.shape[0],):
            raise ModelEvaluationError(f"model returned shape {y.shape} for {x.shape[0]} rows")
        bad = ~np.isfinite(y)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise ModelEvaluationError(f"model returned a non-finite value at input row {k}: {x[k].tolist()}", row=x[k].tolist())
        return y

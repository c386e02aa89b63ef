"""Adaptive dataset generation and a small MLP surrogate of the cell response.

The sampler walks each input line with a default step and checks how well
the last two accepted samples predict the next one by linear
extrapolation::

    res = max|y - y_lin| / max(||y||_F, floor)

If ``res > tol`` the candidate is moved halfway back towards the last
accepted input and re-evaluated, up to ``max_depth`` times.  Accepted
samples therefore cluster where the response bends.
"""
from __future__ import annotations

import hashlib
import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import TrainingError

log = logging.getLogger(__name__)

DATASET_HEADER = "# porohyper-dataset v1"
MODEL_HEADER = "# porohyper-mlp v1"


def _fmt(v):
    return format(float(v), ".17g")


# -- dataset -----------------------------------------------------------------

@dataclass
class Dataset:
    inputs: np.ndarray
    outputs: np.ndarray
    input_names: list
    output_names: list
    line: np.ndarray = None          # traversal line of each sample
    flagged: np.ndarray = None       # residual check not met at max depth
    residual: np.ndarray = None      # residual at acceptance (nan for bootstrap samples)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        n = len(self.inputs)
        if len(self.outputs) != n:
            raise ValueError("inputs and outputs differ in length")
        if self.inputs.shape[1] != len(self.input_names) or self.outputs.shape[1] != len(self.output_names):
            raise ValueError("component names do not match array widths")
        self.line = np.zeros(n, int) if self.line is None else np.asarray(self.line, int)
        self.flagged = np.zeros(n, bool) if self.flagged is None else np.asarray(self.flagged, bool)
        self.residual = np.full(n, np.nan) if self.residual is None else np.asarray(self.residual, float)

    def __len__(self):
        return len(self.inputs)

    def duplicates(self, tol=1e-12):
        d = np.abs(self.inputs[:, None, :] - self.inputs[None, :, :]).max(axis=2)
        i, j = np.nonzero(np.triu(d <= tol, k=1))
        return list(zip(i.tolist(), j.tolist()))

    def to_text(self):
        out = io.StringIO()
        out.write(DATASET_HEADER + "\n")
        for k in sorted(self.provenance):
            out.write(f"# {k} = {self.provenance[k]}\n")
        cols = list(self.input_names) + list(self.output_names) + ["line", "flagged", "residual"]
        out.write("\t".join(cols) + "\n")
        for x, y, l, f, r in zip(self.inputs, self.outputs, self.line, self.flagged, self.residual):
            vals = [_fmt(v) for v in x] + [_fmt(v) for v in y] + [str(int(l)), str(int(f)), _fmt(r)]
            out.write("\t".join(vals) + "\n")
        return out.getvalue()

    def save(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_text())

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def load(cls, path, n_inputs=None):
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != DATASET_HEADER:
            raise ValueError(f"{path}: not a dataset file (bad header)")
        prov = {}
        k = 1
        while k < len(lines) and lines[k].startswith("# "):
            key, _, val = lines[k][2:].partition(" = ")
            prov[key] = val
            k += 1
        cols = lines[k].split("\t")
        data = np.array([[float(v) for v in ln.split("\t")] for ln in lines[k + 1:] if ln.strip()])
        data = data.reshape(-1, len(cols))
        n_io = len(cols) - 3
        n_in = int(prov.get("n_inputs", n_inputs if n_inputs is not None else 2))
        return cls(data[:, :n_in], data[:, n_in:n_io], cols[:n_in], cols[n_in:n_io],
                   data[:, -3].astype(int), data[:, -2].astype(bool), data[:, -1], prov)


@dataclass(frozen=True)
class SamplerConfig:
    steps: tuple = (0.02, 0.02)
    tol: float = 1e-3
    max_depth: int = 6
    floor: float = 1e-8

    def __post_init__(self):
        if any(not s > 0 for s in self.steps):
            raise ValueError("sampler steps must be positive")
        if not self.tol > 0:
            raise ValueError("sampler tolerance must be positive")
        if self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")


def extrapolation_residual(x, y, x1, y1, x2, y2, floor=1e-8):
    """Residual of predicting ``y`` at ``x`` from (x2, y2), (x1, y1) (x1 most recent)."""
    y, y1, y2 = (np.asarray(v, dtype=float) for v in (y, y1, y2))
    slope = (y1 - y2) / (x1 - x2)
    y_lin = y1 + slope * (x - x1)
    return float(np.max(np.abs(y - y_lin)) / max(np.linalg.norm(y), floor))


def _grid(lo, hi, step):
    n = int(np.floor((hi - lo) / step + 1e-9))
    g = lo + step * np.arange(n + 1)
    if hi - g[-1] > 1e-12 * max(1.0, abs(hi)):
        g = np.append(g, hi)
    return g


def _sample_line(oracle, fixed, axis, targets, cfg, line_id, out):
    """Walk one line; append accepted (x, y, line, flag, res) records to ``out``."""
    xs, ys = [], []
    if hasattr(oracle, "reset"):
        oracle.reset()

    seen = {}   # a rejected target is re-checked later against new neighbours

    def evaluate(t):
        point = fixed.copy()
        point[axis] = t
        if t not in seen:
            try:
                seen[t] = np.asarray(oracle(point), dtype=float)
            except Exception as exc:  # oracle failures are recorded, not fatal
                log.warning("oracle failed at %s: %s", point, exc)
                out["failures"].append((point.tolist(), str(exc)))
                seen[t] = None
        return point, seen[t]

    for target in targets:
        if len(xs) < 2:
            point, y = evaluate(target)
            if y is not None:
                xs.append(target)
                ys.append(y)
                out["records"].append((point, y, line_id, False, np.nan))
            continue
        cand, depth = target, 0
        while True:
            point, y = evaluate(cand)
            if y is None:
                break
            res = extrapolation_residual(cand, y, xs[-1], ys[-1], xs[-2], ys[-2], cfg.floor)
            if res <= cfg.tol or depth >= cfg.max_depth:
                flag = res > cfg.tol
                if flag:
                    log.info("bisection depth exhausted at %s (res=%.3e)", point, res)
                xs.append(cand)
                ys.append(y)
                out["records"].append((point, y, line_id, flag, res))
                if cand == target:
                    break
                cand, depth = target, 0
            else:
                cand = 0.5 * (cand + xs[-1])
                depth += 1


def adaptive_sample(oracle, axes, config=None, moving_axis=0, input_names=None,
                    output_names=None, provenance=None):
    """Sample ``oracle`` over a box with the extrapolation-residual refinement.

    ``axes`` is a list of ``(lo, hi)`` ranges.  The moving axis is swept
    line by line for every grid value of the remaining axis (serpentine
    order).  A stateful oracle with a ``reset`` method is reset at the start
    of every line, so each line depends only on its own inputs.
    """
    cfg = config or SamplerConfig(steps=tuple(0.02 for _ in axes))
    axes = [tuple(map(float, a)) for a in axes]
    if len(axes) not in (1, 2):
        raise ValueError("adaptive_sample supports one or two input axes")
    if len(cfg.steps) < len(axes):
        raise ValueError("one default step per axis is required")
    out = {"records": [], "failures": []}
    lo, hi = axes[moving_axis]
    forward = _grid(lo, hi, cfg.steps[moving_axis])
    if len(axes) == 1:
        _sample_line(oracle, np.zeros(1), 0, forward, cfg, 0, out)
    else:
        other = 1 - moving_axis
        for k, v in enumerate(_grid(*axes[other], cfg.steps[other])):
            fixed = np.zeros(2)
            fixed[other] = v
            targets = forward if k % 2 == 0 else forward[::-1]
            _sample_line(oracle, fixed, moving_axis, targets, cfg, k, out)
    recs = out["records"]
    if not recs:
        raise ValueError("oracle produced no samples")
    X = np.array([r[0] for r in recs])
    Y = np.array([r[1] for r in recs])
    names_in = input_names or [f"x{i + 1}" for i in range(X.shape[1])]
    names_out = output_names or [f"y{i + 1}" for i in range(Y.shape[1])]
    prov = {"n_inputs": X.shape[1], "tol": cfg.tol, "max_depth": cfg.max_depth,
            "steps": ",".join(_fmt(s) for s in cfg.steps), "failures": len(out["failures"])}
    prov.update(provenance or {})
    return Dataset(X, Y, names_in, names_out, [r[2] for r in recs], [r[3] for r in recs],
                   [r[4] for r in recs], prov)


def replay_residuals(dataset, tol, floor=1e-8):
    """Recompute the residual check along each line; return violations of unflagged samples."""
    bad = []
    for line in np.unique(dataset.line):
        idx = np.flatnonzero(dataset.line == line)
        X, Y = dataset.inputs[idx], dataset.outputs[idx]
        axis = int(np.argmax(np.ptp(X, axis=0))) if len(idx) > 1 else 0
        for k in range(2, len(idx)):
            r = extrapolation_residual(X[k, axis], Y[k], X[k - 1, axis], Y[k - 1],
                                       X[k - 2, axis], Y[k - 2], floor)
            if r > tol * (1 + 1e-12) and not dataset.flagged[idx[k]]:
                bad.append((int(idx[k]), r))
    return bad


# -- multilayer perceptron ---------------------------------------------------

class MLPSurrogate(RegressorMixin, BaseEstimator):
    """Fully connected tanh network trained with full-batch Adam.

    Inputs and outputs are standardised per component; the cost is the
    mean squared error in the standardised output space.
    """

    def __init__(self, hidden_layer_sizes=(32, 32), learning_rate=1e-3, beta_1=0.9,
                 beta_2=0.999, epsilon=1e-8, max_epochs=20000, tol=1e-8, random_state=0,
                 extrapolation_margin=0.1):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.beta_1 = beta_1
        self.beta_2 = beta_2
        self.epsilon = epsilon
        self.max_epochs = max_epochs
        self.tol = tol
        self.random_state = random_state
        self.extrapolation_margin = extrapolation_margin

    # normalisation ---------------------------------------------------------
    @staticmethod
    def _affine(A):
        mean = A.mean(axis=0)
        scale = A.std(axis=0)
        scale[scale < 1e-12] = 1.0
        return mean, scale

    def normalize_inputs(self, X):
        return (X - self.x_mean_) / self.x_scale_

    def denormalize_inputs(self, Z):
        return Z * self.x_scale_ + self.x_mean_

    # network ---------------------------------------------------------------
    def _init_params(self, n_in, n_out):
        rng = np.random.default_rng(self.random_state)
        sizes = [n_in, *self.hidden_layer_sizes, n_out]
        W, b = [], []
        for a, c in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (a + c))
            W.append(rng.uniform(-lim, lim, size=(a, c)))
            b.append(np.zeros(c))
        return W, b

    @staticmethod
    def _forward(W, b, Z):
        acts = [Z]
        h = Z
        for k, (Wk, bk) in enumerate(zip(W, b)):
            h = h @ Wk + bk
            if k < len(W) - 1:
                h = np.tanh(h)
            acts.append(h)
        return acts

    @classmethod
    def loss_and_grad(cls, W, b, Z, T):
        """Mean squared error and its gradient by backpropagation."""
        acts = cls._forward(W, b, Z)
        diff = acts[-1] - T
        loss = float(np.mean(diff**2))
        delta = 2.0 * diff / diff.size
        gW, gb = [None] * len(W), [None] * len(W)
        for k in range(len(W) - 1, -1, -1):
            gW[k] = acts[k].T @ delta
            gb[k] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ W[k].T) * (1.0 - acts[k] ** 2)
        return loss, gW, gb

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = y.reshape(len(y), -1)
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        self.x_mean_, self.x_scale_ = self._affine(X)
        self.y_mean_, self.y_scale_ = self._affine(y)
        self.x_min_, self.x_max_ = X.min(axis=0), X.max(axis=0)
        Z = self.normalize_inputs(X)
        T = (y - self.y_mean_) / self.y_scale_
        W, b = self._init_params(X.shape[1], y.shape[1])
        mW = [np.zeros_like(w) for w in W]
        vW = [np.zeros_like(w) for w in W]
        mb = [np.zeros_like(v) for v in b]
        vb = [np.zeros_like(v) for v in b]
        b1, b2, lr, eps = self.beta_1, self.beta_2, self.learning_rate, self.epsilon
        history = []
        loss = np.inf
        epoch = 0
        for epoch in range(1, self.max_epochs + 1):
            loss, gW, gb = self.loss_and_grad(W, b, Z, T)
            if not np.isfinite(loss):
                raise TrainingError(f"cost diverged at epoch {epoch}", epoch)
            history.append(loss)
            if loss < self.tol:
                break
            c1, c2 = 1.0 - b1**epoch, 1.0 - b2**epoch
            for P, G, m, v in ((W, gW, mW, vW), (b, gb, mb, vb)):
                for k in range(len(P)):
                    m[k] = b1 * m[k] + (1 - b1) * G[k]
                    v[k] = b2 * v[k] + (1 - b2) * G[k] ** 2
                    P[k] = P[k] - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
        self.coefs_, self.intercepts_ = W, b
        self.loss_ = float(self.loss_and_grad(W, b, Z, T)[0])
        self.n_epochs_ = epoch
        self.loss_curve_ = history
        return self

    def _check(self, X):
        check_is_fitted(self, "coefs_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} input components, got {X.shape[1]}")
        return X

    def extrapolation_flags(self, X):
        X = self._check(X)
        span = self.x_max_ - self.x_min_
        lo = self.x_min_ - self.extrapolation_margin * span
        hi = self.x_max_ + self.extrapolation_margin * span
        return np.any((X < lo) | (X > hi), axis=1)

    def predict(self, X):
        X = self._check(X)
        flags = self.extrapolation_flags(X)
        if flags.any():
            warnings.warn(f"{int(flags.sum())} input(s) lie beyond the trained box", stacklevel=2)
        out = self._forward(self.coefs_, self.intercepts_, self.normalize_inputs(X))[-1]
        return out * self.y_scale_ + self.y_mean_

    # persistence -----------------------------------------------------------
    def to_text(self):
        check_is_fitted(self, "coefs_")
        lines = [MODEL_HEADER]
        sizes = [self.n_features_in_, *self.hidden_layer_sizes, self.n_outputs_]
        lines.append("sizes " + " ".join(str(s) for s in sizes))
        lines.append("activation tanh linear")
        lines.append(f"epochs {self.n_epochs_}")
        lines.append(f"loss {_fmt(self.loss_)}")
        for name in ("x_mean_", "x_scale_", "x_min_", "x_max_", "y_mean_", "y_scale_"):
            lines.append(f"{name.rstrip('_')} " + " ".join(_fmt(v) for v in getattr(self, name)))
        for k, (Wk, bk) in enumerate(zip(self.coefs_, self.intercepts_)):
            lines.append(f"layer {k} {Wk.shape[0]} {Wk.shape[1]}")
            for row in Wk:
                lines.append(" ".join(_fmt(v) for v in row))
            lines.append("bias " + " ".join(_fmt(v) for v in bk))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_text())

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != MODEL_HEADER:
            raise ValueError(f"{path}: not a model file (bad header)")
        it = iter(lines[1:])
        sizes = [int(v) for v in next(it).split()[1:]]
        next(it)
        model = cls(hidden_layer_sizes=tuple(sizes[1:-1]))
        model.n_epochs_ = int(next(it).split()[1])
        model.loss_ = float(next(it).split()[1])
        for name in ("x_mean_", "x_scale_", "x_min_", "x_max_", "y_mean_", "y_scale_"):
            setattr(model, name, np.array([float(v) for v in next(it).split()[1:]]))
        W, b = [], []
        for _ in range(len(sizes) - 1):
            _, _, r, c = next(it).split()
            W.append(np.array([[float(v) for v in next(it).split()] for _ in range(int(r))]).reshape(int(r), int(c)))
            b.append(np.array([float(v) for v in next(it).split()[1:]]))
        model.coefs_, model.intercepts_ = W, b
        model.n_features_in_, model.n_outputs_ = sizes[0], sizes[-1]
        model.loss_curve_ = []
        return model


def holdout_split(n, fraction=0.1, seed=0):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = max(1, int(round(fraction * n))) if fraction > 0 else 0
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


@dataclass
class TrainingReport:
    train_index: np.ndarray
    test_index: np.ndarray
    holdout_max_abs_error: float
    train_max_abs_error: float
    final_cost: float
    epochs: int


def train(dataset, holdout=0.1, seed=0, **hyper):
    """Fit an ``MLPSurrogate`` on ``dataset`` with a seeded held-out split."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    tr, te = holdout_split(len(dataset), holdout, seed)
    model = MLPSurrogate(random_state=seed, **hyper)
    model.fit(dataset.inputs[tr], dataset.outputs[tr])
    err_tr = float(np.max(np.abs(model.predict(dataset.inputs[tr]) - dataset.outputs[tr])))
    err_te = float(np.max(np.abs(model.predict(dataset.inputs[te]) - dataset.outputs[te]))) if len(te) else 0.0
    return model, TrainingReport(tr, te, err_te, err_tr, model.loss_, model.n_epochs_)


def surrogate_tangents(model, inputs, delta=1e-6):
    """Central-difference Jacobian ``d output / d input``, shape (..., n_out, n_in)."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    n_in = X.shape[1]
    cols = []
    for k in range(n_in):
        e = np.zeros(n_in)
        e[k] = delta
        cols.append((model.predict(X + e) - model.predict(X - e)) / (2 * delta))
    J = np.stack(cols, axis=-1)
    return J[0] if np.ndim(inputs) == 1 else J


# -- cell-problem oracle -------------------------------------------------------

class CellOracle:
    """Maps ``(H22, p)`` to the diagonal of the solid-mean ``grad u1``.

    Consecutive calls continue from the previous converged field;
    ``reset`` returns to the undeformed state so that every traversal line
    is reproducible on its own.
    """

    input_names = ("grad_u0_22", "p0")
    output_names = ("avg_grad_u1_11", "avg_grad_u1_22", "avg_grad_u1_33")

    def __init__(self, problem, max_increment=0.05):
        self.problem = problem
        self.max_increment = max_increment
        self.calls = 0
        self.reset()

    def reset(self):
        self._x = None
        self._last = np.zeros(2)

    @staticmethod
    def macro_gradient(h22):
        H = np.zeros((3, 3))
        H[1, 1] = h22
        return H

    def __call__(self, point):
        point = np.asarray(point, dtype=float)
        jump = float(np.max(np.abs(point - self._last)))
        n_inc = max(1, int(np.ceil(jump / self.max_increment - 1e-12)))
        start = None if self._x is None else (self._x, self.macro_gradient(self._last[0]), self._last[1])
        H = self.macro_gradient(point[0])
        x, _ = self.problem.solve_free(H, point[1], n_inc, start)
        self._x, self._last = x, point.copy()
        self.calls += 1
        out = np.diag(self.problem.average_gradient(x, H)).copy()
        log.debug("oracle call %d at %s -> %s", self.calls, point, out)
        return out


CONSOLIDATION_BOX = ((-0.35, 0.05), (0.0, 0.2))


def cell_dataset(problem, box=CONSOLIDATION_BOX, config=None, provenance=None):
    """Adaptive dataset of the solid cell response over the (H22, p) box."""
    oracle = CellOracle(problem)
    prov = {"poisson_ratio": _fmt(problem.params.poisson_ratio),
            "box": ";".join(f"{_fmt(a)},{_fmt(b)}" for a, b in box)}
    prov.update(provenance or {})
    return adaptive_sample(oracle, box, config or SamplerConfig(), moving_axis=0,
                           input_names=list(CellOracle.input_names),
                           output_names=list(CellOracle.output_names), provenance=prov)

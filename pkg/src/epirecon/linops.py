"""Linear operators with exact adjoints and power-iteration norm estimates.

Every operator is immutable after construction, maps a fixed input shape to
a fixed output shape, and implements the exact algebraic adjoint of its
apply (matched pairs). `norm_bound` is set only when the operator norm is
known exactly; otherwise use estimate_norm.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeMismatchError, as_tensor, check_shape, ensure_finite


class LinOp:
    """Base class: subclasses set input_shape, output_shape, kind, norm_bound."""

    kind = "abstract"
    norm_bound = None  # exact operator norm when known, else None

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        check_shape(x, self.input_shape, f"{self.kind}.apply input")
        out = self._apply(x)
        return ensure_finite(out, f"{self.kind}.apply output")

    def adjoint(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        check_shape(w, self.output_shape, f"{self.kind}.adjoint input")
        out = self._adjoint(w)
        return ensure_finite(out, f"{self.kind}.adjoint output")

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, w):
        raise NotImplementedError

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape, dtype=np.int64)) if self.input_shape else 1

    @property
    def output_size(self) -> int:
        return int(np.prod(self.output_shape, dtype=np.int64)) if self.output_shape else 1


class Dense(LinOp):
    """Matrix multiply on the flattened input."""

    kind = "dense"

    def __init__(self, matrix, input_shape=None):
        matrix = as_tensor(matrix)
        if matrix.ndim != 2:
            raise ValueError(f"dense operator needs a 2-d matrix, got shape {matrix.shape}")
        self.matrix = matrix
        m, n = matrix.shape
        self.input_shape = (n,) if input_shape is None else tuple(int(s) for s in input_shape)
        if int(np.prod(self.input_shape)) != n:
            raise ShapeMismatchError((n,), self.input_shape, "dense input_shape product")
        self.output_shape = (m,)

    def _apply(self, x):
        return self.matrix @ x.ravel()

    def _adjoint(self, w):
        return (self.matrix.T @ w).reshape(self.input_shape)


class Conv2D(LinOp):
    """2-d correlation, zero padding, stride 1, same spatial size.

    Filters are stored as (out_channels, in_channels, kh, kw). A 2-d input
    is treated as a single channel; a single-output-channel result is
    squeezed back to 2-d so one-filter convolutions preserve the image shape.
    """

    kind = "conv2d"

    def __init__(self, filters, input_shape):
        filters = as_tensor(filters)
        input_shape = tuple(int(s) for s in input_shape)
        if len(input_shape) == 2:
            in_channels = 1
            self._squeeze_in = True
        elif len(input_shape) == 3:
            in_channels = input_shape[0]
            self._squeeze_in = False
        else:
            raise ValueError(f"conv2d input must be 2-d or 3-d, got {input_shape}")
        if filters.ndim == 3:
            filters = filters[:, None, :, :]
        if filters.ndim != 4:
            raise ValueError(f"conv2d filters must be 3-d or 4-d, got shape {filters.shape}")
        if filters.shape[1] != in_channels:
            raise ShapeMismatchError(
                (filters.shape[0], in_channels, filters.shape[2], filters.shape[3]),
                filters.shape, "conv2d filter channels")
        self.filters = filters
        self.input_shape = input_shape
        out_channels = filters.shape[0]
        h, w = input_shape[-2:]
        kh, kw = filters.shape[2:]
        if kh > h + (kh - 1) // 2 or kw > w + (kw - 1) // 2:
            raise ValueError(f"kernel {kh}x{kw} too large for input {h}x{w}")
        self._squeeze_out = out_channels == 1
        self.output_shape = (h, w) if self._squeeze_out else (out_channels, h, w)

    def _windows(self, arr, pad_top, pad_bot, pad_left, pad_right, kh, kw):
        padded = np.pad(arr, ((0, 0), (pad_top, pad_bot), (pad_left, pad_right)))
        win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
        return win  # (channels, H, W, kh, kw)

    def _apply(self, x):
        if self._squeeze_in:
            x = x[None]
        kh, kw = self.filters.shape[2:]
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        win = self._windows(x, ph, kh - 1 - ph, pw, kw - 1 - pw, kh, kw)
        out = np.tensordot(self.filters, win, axes=([1, 2, 3], [0, 3, 4]))
        return out[0] if self._squeeze_out else out

    def _adjoint(self, w):
        if self._squeeze_out:
            w = w[None]
        kh, kw = self.filters.shape[2:]
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        win = self._windows(w, kh - 1 - ph, ph, kw - 1 - pw, pw, kh, kw)
        flipped = self.filters[:, :, ::-1, ::-1]
        out = np.tensordot(flipped, win, axes=([0, 2, 3], [0, 3, 4]))
        return out[0] if self._squeeze_in else out


class AvgPool2D(LinOp):
    """Non-overlapping mean pooling; sides must divide exactly.

    Exact norm: pooling P satisfies P P* = I / (ph*pw), so |P| = 1/sqrt(ph*pw).
    """

    kind = "avgpool2d"

    def __init__(self, pool, input_shape):
        ph, pw = (int(pool), int(pool)) if np.isscalar(pool) else (int(pool[0]), int(pool[1]))
        if ph < 1 or pw < 1:
            raise ValueError(f"pool size must be positive, got {(ph, pw)}")
        input_shape = tuple(int(s) for s in input_shape)
        if len(input_shape) not in (2, 3):
            raise ValueError(f"avgpool2d input must be 2-d or 3-d, got {input_shape}")
        h, w = input_shape[-2:]
        if h % ph or w % pw:
            raise ValueError(
                f"pool {(ph, pw)} does not divide input {h}x{w}; "
                "implicit cropping would break adjoint exactness")
        self.pool = (ph, pw)
        self.input_shape = input_shape
        self.output_shape = input_shape[:-2] + (h // ph, w // pw)
        self.norm_bound = 1.0 / np.sqrt(ph * pw)

    def _apply(self, x):
        ph, pw = self.pool
        h, w = self.input_shape[-2:]
        shaped = x.reshape(self.input_shape[:-2] + (h // ph, ph, w // pw, pw))
        return shaped.mean(axis=(-3, -1))

    def _adjoint(self, s):
        ph, pw = self.pool
        spread = np.repeat(np.repeat(s, ph, axis=-2), pw, axis=-1)
        return spread / (ph * pw)


class DiagonalMask(LinOp):
    """Entrywise multiplication by a fixed tensor (self-adjoint)."""

    kind = "diagonal_mask"

    def __init__(self, mask):
        self.mask = as_tensor(mask)
        self.input_shape = self.mask.shape
        self.output_shape = self.mask.shape
        self.norm_bound = float(np.max(np.abs(self.mask))) if self.mask.size else 0.0

    def _apply(self, x):
        return self.mask * x

    def _adjoint(self, w):
        return self.mask * w


class ScaledIdentity(LinOp):
    """scale * x on a fixed shape; used for the auxiliary-variable block rows."""

    kind = "scaled_identity"

    def __init__(self, shape, scale=1.0):
        self.input_shape = tuple(int(s) for s in shape)
        self.output_shape = self.input_shape
        self.scale = float(scale)
        self.norm_bound = abs(self.scale)

    def _apply(self, x):
        return self.scale * x

    def _adjoint(self, w):
        return self.scale * w


class Compose(LinOp):
    """Composition of operators, applied in the listed order."""

    kind = "compose"

    def __init__(self, parts):
        parts = tuple(parts)
        if not parts:
            raise ValueError("compose needs at least one operator")
        for a, b in zip(parts, parts[1:]):
            if tuple(a.output_shape) != tuple(b.input_shape):
                raise ShapeMismatchError(a.output_shape, b.input_shape,
                                         f"compose {a.kind} -> {b.kind}")
        self.parts = parts
        self.input_shape = parts[0].input_shape
        self.output_shape = parts[-1].output_shape
        bounds = [p.norm_bound for p in parts]
        if all(b is not None for b in bounds):
            prod = 1.0
            for b in bounds:
                prod *= b
            self.norm_bound = prod

    def _apply(self, x):
        for p in self.parts:
            x = p.apply(x)
        return x

    def _adjoint(self, w):
        for p in reversed(self.parts):
            w = p.adjoint(w)
        return w


def min_coefficient(op):
    """Smallest matrix entry of the operator, or None when not certifiable.

    Used to check the nonnegativity required of carry-path weights; returns
    0.0 for structurally nonnegative kinds whose off-diagonal entries are 0.
    """
    if isinstance(op, Dense):
        return float(op.matrix.min())
    if isinstance(op, Conv2D):
        # zero padding contributes zero entries; the sign is set by filters
        return min(float(op.filters.min()), 0.0)
    if isinstance(op, DiagonalMask):
        return min(float(op.mask.min()), 0.0) if op.mask.size else 0.0
    if isinstance(op, AvgPool2D):
        return 0.0
    if isinstance(op, ScaledIdentity):
        return min(op.scale, 0.0)
    if isinstance(op, Compose):
        mins = [min_coefficient(p) for p in op.parts]
        if any(m is None for m in mins):
            return None
        # product of entrywise-nonnegative maps stays entrywise nonnegative
        return 0.0 if all(m >= 0.0 for m in mins) else None
    if op.kind == "radon":
        return 0.0  # bilinear splat weights and scale are nonnegative
    return None


@dataclass(frozen=True)
class NormEstimate:
    """Power-iteration result; `value` underestimates the true norm slightly."""

    value: float
    iterations: int
    converged: bool
    history: tuple

    def __float__(self):
        return self.value


def estimate_norm(op, tol: float = 1e-6, max_iters: int = 500, seed: int = 0) -> NormEstimate:
    """Operator-norm estimate by power iteration on adjoint(apply(.)).

    Deterministic for a fixed seed. Rayleigh-quotient estimates are
    monotonically non-decreasing; `converged` is False if the relative
    change never fell below tol (the best estimate is still returned).
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=op.input_shape)
    nrm = np.sqrt(np.vdot(x, x))
    if nrm == 0.0:
        raise ValueError("degenerate start vector")
    x /= nrm
    history = []
    estimate = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        y = op.adjoint(op.apply(x))
        rayleigh = float(np.vdot(x, y))  # = |K x|^2 >= 0
        new_estimate = np.sqrt(max(rayleigh, 0.0))
        history.append(new_estimate)
        ynorm = float(np.sqrt(np.vdot(y, y)))
        if ynorm == 0.0:
            estimate = 0.0
            converged = True
            break
        done = iterations > 1 and abs(new_estimate - estimate) <= tol * max(new_estimate, 1e-300)
        estimate = new_estimate
        if done:
            converged = True
            break
        x = y / ynorm
    return NormEstimate(estimate, iterations, converged, tuple(history))


def materialize(op) -> np.ndarray:
    """Dense matrix of the operator, via basis vectors (small instances only)."""
    n = op.input_size
    m = op.output_size
    mat = np.zeros((m, n))
    basis = np.zeros(op.input_shape)
    flat = basis.reshape(-1)
    for j in range(n):
        flat[j] = 1.0
        mat[:, j] = op.apply(basis).ravel()
        flat[j] = 0.0
    return mat


def adjoint_mismatch(op, x, w) -> float:
    """|<Kx, w> - <x, K*w>| for one test pair."""
    lhs = float(np.vdot(op.apply(x), w))
    rhs = float(np.vdot(x, op.adjoint(w)))
    return abs(lhs - rhs)


# --- descriptor (de)serialization -------------------------------------------
#
# Operators are stored in JSON manifests; tensor payloads go to blob files
# through the save/load callables (name hint -> filename / filename -> array).

def op_to_config(op, save_blob):
    if isinstance(op, Dense):
        return {"kind": op.kind, "matrix": save_blob("matrix", op.matrix),
                "input_shape": list(op.input_shape)}
    if isinstance(op, Conv2D):
        return {"kind": op.kind, "filters": save_blob("filters", op.filters),
                "input_shape": list(op.input_shape)}
    if isinstance(op, AvgPool2D):
        return {"kind": op.kind, "pool": list(op.pool), "input_shape": list(op.input_shape)}
    if isinstance(op, DiagonalMask):
        return {"kind": op.kind, "mask": save_blob("mask", op.mask)}
    if isinstance(op, ScaledIdentity):
        return {"kind": op.kind, "shape": list(op.input_shape), "scale": op.scale}
    if isinstance(op, Compose):
        return {"kind": op.kind, "parts": [op_to_config(p, save_blob) for p in op.parts]}
    if op.kind == "radon":
        g = op.geometry
        return {"kind": "radon", "geometry": {
            "image_side": g.image_side, "n_angles": g.n_angles, "n_bins": g.n_bins,
            "detector_spacing": g.detector_spacing, "scale": g.scale,
            "angles": list(g.angles)}}
    raise ValueError(f"cannot serialize operator kind {op.kind!r}")


def op_from_config(cfg, load_blob):
    kind = cfg.get("kind")
    if kind == "dense":
        return Dense(load_blob(cfg["matrix"]), input_shape=cfg.get("input_shape"))
    if kind == "conv2d":
        return Conv2D(load_blob(cfg["filters"]), input_shape=cfg["input_shape"])
    if kind == "avgpool2d":
        return AvgPool2D(cfg["pool"], input_shape=cfg["input_shape"])
    if kind == "diagonal_mask":
        return DiagonalMask(load_blob(cfg["mask"]))
    if kind == "scaled_identity":
        return ScaledIdentity(cfg["shape"], cfg.get("scale", 1.0))
    if kind == "compose":
        return Compose([op_from_config(p, load_blob) for p in cfg["parts"]])
    if kind == "radon":
        from .radon import Radon, RadonGeometry
        g = cfg["geometry"]
        geom = RadonGeometry(image_side=g["image_side"], n_angles=g["n_angles"],
                             n_bins=g["n_bins"], detector_spacing=g["detector_spacing"],
                             scale=g["scale"], angles=tuple(g["angles"]))
        return Radon(geom)
    raise ValueError(f"unknown operator kind {kind!r}")

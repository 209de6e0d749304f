"""Small fixed-size linear algebra: 3-vectors, 3x3 matrices, a rotation-variant
SVD, Hencky-strain helpers, and forward-mode dual scalars.

Vectors and matrices are plain float64 numpy arrays of shape (3,) and (3, 3);
helpers here never mutate their inputs.  The SVD convention keeps both factors
in SO(3) and folds any reflection into the sign of the smallest singular
value, which is what the return mappings downstream rely on.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from .errors import IndexOutOfRange, NonPositiveSingularValue
from ._kernels import svd3_kernel


def vec3(x, y, z):
    return np.array([x, y, z], dtype=np.float64)


def mat3(rows) -> np.ndarray:
    m = np.asarray(rows, dtype=np.float64).reshape(3, 3)
    return m.copy()


IDENTITY3 = np.eye(3)


class Svd3(NamedTuple):
    """Rotation-variant decomposition m = U @ diag(sigma) @ V.T.

    U and V are proper rotations (det +1); sigma is sorted so that
    sigma[0] >= sigma[1] >= |sigma[2]|, with any reflection of the input
    carried by the sign of sigma[2].
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def svd3(m: np.ndarray) -> Svd3:
    """Decompose a 3x3 matrix; deterministic, valid for degenerate inputs."""
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError("svd3 expects a 3x3 matrix")
    if not np.isfinite(m).all():
        raise ValueError("svd3 expects finite entries")
    u = np.empty((3, 3))
    s = np.empty(3)
    v = np.empty((3, 3))
    svd3_kernel(m, u, s, v)
    return Svd3(u, s, v)


def hencky(svd: Svd3) -> np.ndarray:
    """Componentwise log of the singular values (principal logarithmic strain)."""
    if np.any(svd.sigma <= 0.0):
        raise NonPositiveSingularValue(
            f"singular values must be positive, got {svd.sigma}"
        )
    return np.log(svd.sigma)


class DualScalar:
    """Scalar with a forward-mode tangent vector of fixed width P.

    Arithmetic follows the chain rule; mixing with plain numbers treats them
    as constants.  Instances are immutable by convention: operations return
    new objects and never touch operand state.
    """

    __slots__ = ("value", "tangent")

    def __init__(self, value: float, tangent: np.ndarray):
        self.value = float(value)
        self.tangent = np.asarray(tangent, dtype=np.float64)

    @classmethod
    def constant(cls, value: float, width: int) -> "DualScalar":
        return cls(value, np.zeros(width))

    @classmethod
    def seed(cls, value: float, index: int, width: int) -> "DualScalar":
        if not 0 <= index < width:
            raise IndexOutOfRange(f"seed index {index} outside width {width}")
        t = np.zeros(width)
        t[index] = 1.0
        return cls(value, t)

    @property
    def width(self) -> int:
        return self.tangent.shape[0]

    def _coerce(self, other) -> "DualScalar":
        if isinstance(other, DualScalar):
            return other
        return DualScalar.constant(float(other), self.width)

    def __add__(self, other):
        o = self._coerce(other)
        return DualScalar(self.value + o.value, self.tangent + o.tangent)

    __radd__ = __add__

    def __neg__(self):
        return DualScalar(-self.value, -self.tangent)

    def __sub__(self, other):
        o = self._coerce(other)
        return DualScalar(self.value - o.value, self.tangent - o.tangent)

    def __rsub__(self, other):
        o = self._coerce(other)
        return DualScalar(o.value - self.value, o.tangent - self.tangent)

    def __mul__(self, other):
        o = self._coerce(other)
        return DualScalar(
            self.value * o.value, self.value * o.tangent + o.value * self.tangent
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        inv = 1.0 / o.value
        return DualScalar(
            self.value * inv,
            (self.tangent - self.value * inv * o.tangent) * inv,
        )

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent: float):
        v = self.value**exponent
        return DualScalar(v, exponent * self.value ** (exponent - 1.0) * self.tangent)

    def exp(self):
        v = math.exp(self.value)
        return DualScalar(v, v * self.tangent)

    def log(self):
        return DualScalar(math.log(self.value), self.tangent / self.value)

    def sqrt(self):
        v = math.sqrt(self.value)
        return DualScalar(v, self.tangent / (2.0 * v))

    def sin(self):
        return DualScalar(math.sin(self.value), math.cos(self.value) * self.tangent)

    def cos(self):
        return DualScalar(math.cos(self.value), -math.sin(self.value) * self.tangent)

    def tan(self):
        v = math.tan(self.value)
        return DualScalar(v, (1.0 + v * v) * self.tangent)

    def __lt__(self, other):
        return self.value < self._coerce(other).value

    def __le__(self, other):
        return self.value <= self._coerce(other).value

    def __gt__(self, other):
        return self.value > self._coerce(other).value

    def __ge__(self, other):
        return self.value >= self._coerce(other).value

    def __repr__(self):
        return f"DualScalar({self.value!r}, {self.tangent!r})"


def dual_lift(
    values: Sequence[float], active_index: int | None, width: int
) -> list[DualScalar]:
    """Lift plain values to duals; one shared seed column or all-constant.

    With ``active_index`` set, every lifted value gets the unit tangent at
    that column (used to seed one optimization parameter at a time);
    otherwise tangents are zero.
    """
    if active_index is not None and not 0 <= active_index < width:
        raise IndexOutOfRange(f"active_index {active_index} outside width {width}")
    out = []
    for v in np.atleast_1d(np.asarray(values, dtype=np.float64)):
        if active_index is None:
            out.append(DualScalar.constant(v, width))
        else:
            out.append(DualScalar.seed(v, active_index, width))
    return out

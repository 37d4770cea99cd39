"""Truncated Laurent series in ``eps`` with scalar or matrix coefficients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = ["ExpansionSeries"]


@dataclass(frozen=True)
class ExpansionSeries:
    """``sum_k coeffs[k] eps^(base_power + k) + O(eps^error_order)``.

    Coefficients are stored as 2-d arrays; scalar series use 1x1 arrays and
    :meth:`coefficient` unwraps them.
    """

    base_power: int
    coeffs: tuple[np.ndarray, ...]
    error_order: int

    def __post_init__(self):
        arrs = tuple(np.atleast_2d(np.asarray(c, dtype=float)) for c in self.coeffs)
        if not arrs:
            raise ValueError("series needs at least one coefficient")
        shape = arrs[0].shape
        if any(a.shape != shape for a in arrs):
            raise ValueError("coefficient shapes differ")
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise ValueError("non-finite series coefficient")
        object.__setattr__(self, "coeffs", arrs)
        if self.base_power + len(arrs) > self.error_order:
            object.__setattr__(self, "coeffs", arrs[: max(1, self.error_order - self.base_power)])
        if self.truncation_order >= self.error_order:
            raise ValueError("truncation order must be below the error order")

    @classmethod
    def scalar(cls, base_power: int, coeffs: Sequence[float], error_order: int | None = None):
        err = base_power + len(coeffs) if error_order is None else error_order
        return cls(base_power, tuple(np.array([[c]]) for c in coeffs), err)

    @classmethod
    def zero(cls, shape, error_order: int):
        return cls(error_order - 1, (np.zeros(shape),), error_order)

    @property
    def shape(self) -> tuple[int, int]:
        return self.coeffs[0].shape

    @property
    def truncation_order(self) -> int:
        return self.base_power + len(self.coeffs) - 1

    @property
    def is_scalar(self) -> bool:
        return self.shape == (1, 1)

    def coefficient(self, power: int):
        """Coefficient of ``eps^power`` (zero below the base power)."""
        if power >= self.error_order:
            raise ValueError(f"eps^{power} is beyond the error order {self.error_order}")
        k = power - self.base_power
        c = self.coeffs[k] if 0 <= k < len(self.coeffs) else np.zeros(self.shape)
        return float(c[0, 0]) if self.is_scalar else c.copy()

    def powers(self) -> range:
        return range(self.base_power, self.truncation_order + 1)

    def value(self, eps: float):
        tot = sum(c * eps ** (self.base_power + k) for k, c in enumerate(self.coeffs))
        return float(tot[0, 0]) if self.is_scalar else tot

    def leading(self, rtol: float = 0.0) -> "ExpansionSeries":
        """Drop leading coefficients no larger than ``rtol`` times the largest one."""
        cut = rtol * max(float(np.max(np.abs(c))) for c in self.coeffs)
        k = 0
        while k < len(self.coeffs) - 1 and float(np.max(np.abs(self.coeffs[k]))) <= cut:
            k += 1
        return ExpansionSeries(self.base_power + k, self.coeffs[k:], self.error_order)

    def _dense(self, lo: int, hi: int) -> list[np.ndarray]:
        return [np.atleast_2d(self.coefficient(p)) if p <= self.truncation_order and p >= self.base_power
                else np.zeros(self.shape) for p in range(lo, hi)]

    def __add__(self, other: "ExpansionSeries") -> "ExpansionSeries":
        err = min(self.error_order, other.error_order)
        lo = min(self.base_power, other.base_power)
        if lo >= err:
            return ExpansionSeries.zero(self.shape, err)
        a, b = self._dense(lo, err), other._dense(lo, err)
        return ExpansionSeries(lo, tuple(x + y for x, y in zip(a, b)), err)

    def __neg__(self):
        return ExpansionSeries(self.base_power, tuple(-c for c in self.coeffs), self.error_order)

    def __sub__(self, other):
        return self + (-other)

    def scale(self, factor: float) -> "ExpansionSeries":
        return ExpansionSeries(self.base_power, tuple(factor * c for c in self.coeffs), self.error_order)

    def shift(self, k: int) -> "ExpansionSeries":
        """Multiply by ``eps^k``."""
        return ExpansionSeries(self.base_power + k, self.coeffs, self.error_order + k)

    @property
    def T(self) -> "ExpansionSeries":
        return ExpansionSeries(self.base_power, tuple(c.T for c in self.coeffs), self.error_order)

    def __matmul__(self, other: "ExpansionSeries") -> "ExpansionSeries":
        base = self.base_power + other.base_power
        err = min(self.error_order + other.base_power, other.error_order + self.base_power)
        out = []
        for p in range(base, err):
            acc = np.zeros((self.shape[0], other.shape[1]))
            for i, a in enumerate(self.coeffs):
                j = p - base - i
                if 0 <= j < len(other.coeffs):
                    acc = acc + a @ other.coeffs[j]
            out.append(acc)
        if not out:
            return ExpansionSeries.zero((self.shape[0], other.shape[1]), err)
        return ExpansionSeries(base, tuple(out), err)

    def inverse(self) -> "ExpansionSeries":
        """Series inverse; the leading coefficient must be invertible."""
        s = self.leading()
        lead = s.coeffs[0]
        if lead.shape[0] != lead.shape[1]:
            raise ValueError("only square series can be inverted")
        if np.linalg.cond(lead) > 1e12:
            raise np.linalg.LinAlgError("leading coefficient is singular")
        inv0 = np.linalg.inv(lead)
        n = s.error_order - s.base_power
        out = [inv0]
        for k in range(1, n):
            acc = np.zeros_like(inv0)
            for i in range(1, k + 1):
                if i < len(s.coeffs):
                    acc = acc + s.coeffs[i] @ out[k - i]
            out.append(-inv0 @ acc)
        return ExpansionSeries(-s.base_power, tuple(out), s.error_order - 2 * s.base_power)

    def entry_shift(self, row_shift: Sequence[int], col_shift: Sequence[int]) -> "ExpansionSeries":
        """Multiply entry ``(i, j)`` by ``eps^(row_shift[i] + col_shift[j])``."""
        r, c = self.shape
        shifts = np.add.outer(np.asarray(row_shift), np.asarray(col_shift))
        base = self.base_power + int(shifts.min())
        err = self.error_order + int(shifts.min())
        out = [np.zeros(self.shape) for _ in range(base, err)]
        for k, coef in enumerate(self.coeffs):
            p = self.base_power + k
            for i in range(r):
                for j in range(c):
                    q = p + shifts[i, j]
                    if q < err:
                        out[q - base][i, j] += coef[i, j]
        if not out:
            return ExpansionSeries.zero(self.shape, err)
        return ExpansionSeries(base, tuple(out), err)

    def to_rows(self, name: str) -> list[dict]:
        rows = []
        for p in self.powers():
            c = np.atleast_2d(self.coefficient(p))
            for (i, j), v in np.ndenumerate(c):
                rows.append({"quantity": name, "i": i, "j": j, "power": p, "coefficient": float(v)})
        return rows

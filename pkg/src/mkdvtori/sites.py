from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SiteSet:
    """Tangential sites S+ = (j_1 < ... < j_nu); S = +-S+."""

    plus: tuple

    def __post_init__(self):
        plus = tuple(int(j) for j in self.plus)
        if not plus:
            raise ValueError("at least one tangential site is required")
        if any(j <= 0 for j in plus):
            raise ValueError("tangential sites must be positive")
        if len(set(plus)) != len(plus):
            raise ValueError("tangential sites must be distinct")
        object.__setattr__(self, "plus", tuple(sorted(plus)))

    @property
    def nu(self):
        return len(self.plus)

    @property
    def full(self):
        return tuple(sorted([-j for j in self.plus] + list(self.plus)))

    def in_s(self, j):
        return np.isin(np.abs(np.asarray(j)), self.plus)

    def normal_modes(self, n):
        """Normal indices 0 < |j| <= n outside S, ascending."""
        js = np.arange(-n, n + 1)
        return js[(js != 0) & ~self.in_s(js)]

    def ell(self, j):
        """Angle label of a tangential index: e_i for j_i, -e_i for -j_i."""
        out = np.zeros(self.nu, dtype=int)
        i = self.plus.index(abs(int(j)))
        out[i] = 1 if j > 0 else -1
        return out

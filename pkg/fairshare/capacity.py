import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Optional, Sequence, Tuple

import numpy as np

from fairshare.config import settings
from fairshare.errors import DimensionError, InvalidInputError

logger = logging.getLogger(__name__)


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Face:
    """Partition of the class set into an empty part and its support"""

    zero_set: FrozenSet[int]
    num_classes: int

    def __post_init__(self):
        bad = [r for r in self.zero_set if r < 0 or r >= self.num_classes]
        if bad:
            raise DimensionError(f"face indices {bad} outside 0..{self.num_classes - 1}")
        object.__setattr__(self, "zero_set", frozenset(int(r) for r in self.zero_set))

    @property
    def support(self) -> Tuple[int, ...]:
        return tuple(r for r in range(self.num_classes) if r not in self.zero_set)

    @classmethod
    def of(cls, zero_set: Iterable[int], num_classes: int) -> "Face":
        return cls(frozenset(zero_set), num_classes)

    @classmethod
    def from_vector(cls, x: Sequence[float], eps: float = 0.0) -> "Face":
        """Face on which x lies: classes with x_r <= eps are empty"""
        x = np.asarray(x, dtype=float)
        return cls(frozenset(int(r) for r in np.flatnonzero(x <= eps)), len(x))

    def bitmask(self) -> int:
        return sum(1 << r for r in self.zero_set)


@dataclass(frozen=True, eq=False)
class CapacityRegion:
    """
    Polyhedral capacity region C = {lam >= 0 : A lam <= c}.

    A has one row per link and one column per class; entries are the
    capacity a unit of class rate consumes on the link. `class_ids` keeps
    the original class labels after a face restriction.
    """

    A: np.ndarray
    c: np.ndarray
    class_ids: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        c = np.atleast_1d(np.asarray(self.c, dtype=float))

        if A.size == 0 or c.size == 0:
            raise InvalidInputError("capacity region needs at least one link and one class")
        if A.ndim != 2 or c.ndim != 1 or A.shape[0] != c.shape[0]:
            raise DimensionError(f"A has shape {A.shape} but c has {c.shape[0]} links")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(c))):
            raise InvalidInputError("A and c must be finite")
        if np.any(A < 0):
            raise InvalidInputError("A must be entrywise nonnegative")
        if np.any(c <= 0):
            raise InvalidInputError(f"capacities must be positive, got min {c.min():.6g}")

        empty_links = np.flatnonzero(~np.any(A > 0, axis=1))
        if empty_links.size:
            raise InvalidInputError(f"links {empty_links.tolist()} constrain no class")
        free_classes = np.flatnonzero(~np.any(A > 0, axis=0))
        if free_classes.size:
            raise InvalidInputError(f"classes {free_classes.tolist()} use no link (region unbounded)")

        ids = tuple(self.class_ids) if self.class_ids else tuple(range(A.shape[1]))
        if len(ids) != A.shape[1]:
            raise DimensionError(f"{len(ids)} class ids for {A.shape[1]} classes")

        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "c", _frozen(c))
        object.__setattr__(self, "class_ids", ids)

    @classmethod
    def from_lists(cls, A: Sequence[Sequence[float]], c: Sequence[float]) -> "CapacityRegion":
        return cls(np.asarray(A, dtype=float), np.asarray(c, dtype=float))

    @classmethod
    def single_link(cls, num_classes: int = 1, capacity: float = 1.0) -> "CapacityRegion":
        return cls(np.ones((1, num_classes)), np.array([capacity]))

    @property
    def num_links(self) -> int:
        return self.A.shape[0]

    @property
    def num_classes(self) -> int:
        return self.A.shape[1]

    def _check_dim(self, v: Sequence[float], name: str) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.num_classes,):
            raise DimensionError(f"{name} has shape {v.shape}, region has {self.num_classes} classes")
        return v

    def load(self, lam: Sequence[float]) -> np.ndarray:
        """Per-link consumption A lam"""
        return self.A @ self._check_dim(lam, "rate vector")

    def slack(self, lam: Sequence[float]) -> np.ndarray:
        return self.c - self.load(lam)

    def contains(self, lam: Sequence[float], tol: Optional[float] = None) -> bool:
        """lam >= 0 and A lam <= c, each constraint up to an absolute tolerance"""
        tol = settings.FEAS_TOL if tol is None else tol
        lam = self._check_dim(lam, "rate vector")
        return bool(np.all(lam >= -tol) and np.all(self.A @ lam <= self.c + tol))

    def in_interior(self, rho: Sequence[float], margin: Optional[float] = None) -> bool:
        """A rho < c with every link slack strictly above margin"""
        margin = settings.FEAS_TOL if margin is None else margin
        rho = self._check_dim(rho, "load vector")
        if np.any(rho < 0):
            raise InvalidInputError("loads must be nonnegative")
        return bool(np.all(self.c - self.A @ rho > margin))

    def face_restrict(self, face: Face) -> "CapacityRegion":
        """Region seen by the support of a face; links left unused are dropped"""
        if face.num_classes != self.num_classes:
            raise DimensionError(f"face over {face.num_classes} classes, region has {self.num_classes}")
        support = list(face.support)
        if not support:
            raise InvalidInputError("face restriction needs a nonempty support")
        if len(support) == self.num_classes:
            return self

        sub = self.A[:, support]
        keep = np.any(sub > 0, axis=1)
        return CapacityRegion(
            sub[keep],
            self.c[keep],
            class_ids=tuple(self.class_ids[r] for r in support),
        )

    def kept_links(self, face: Face) -> np.ndarray:
        """Indices of links that survive face_restrict(face)"""
        return np.flatnonzero(np.any(self.A[:, list(face.support)] > 0, axis=1))

    def max_rates(self) -> np.ndarray:
        """Largest feasible rate of each class on its own"""
        with np.errstate(divide="ignore"):
            ratios = np.where(self.A > 0, self.c[:, None] / np.where(self.A > 0, self.A, 1.0), np.inf)
        return ratios.min(axis=0)

    def describe(self) -> str:
        return f"{self.num_links} links x {self.num_classes} classes"

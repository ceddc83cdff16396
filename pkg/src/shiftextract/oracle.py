"""Label-only query interface with honest query accounting.

The handle wraps a backend that maps a QueryInput to a class label.  Every
label query increments a counter under a lock, so accounting behaves as if
queries were serialized even under concurrent callers.  The two-probe tie
test (``is_critical``) always issues exactly two queries, never short
circuiting, so query budgets are a pure function of call counts.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import PRE, ModelGraph, QueryInput, ShiftSet, forward_label


class OracleHandle:
    """Counted access to a label-only classifier with malleable shifts.

    ``probe_eps`` is the logit nudge used by ``is_critical``; it must exceed
    the float noise accumulated by a forward pass but stay far below the
    scale of genuine logit gaps.
    """

    def __init__(
        self,
        backend: Callable[[QueryInput], int],
        *,
        argmax_id: int,
        n_classes: int,
        probe_eps: float = 1e-8,
    ):
        if probe_eps <= 0:
            raise ValueError("probe_eps must be positive")
        self._backend = backend
        self.argmax_id = argmax_id
        self.n_classes = n_classes
        self.probe_eps = probe_eps
        self._count = 0
        self._lock = threading.Lock()
        self._probe_cache: dict[tuple[int, float], ShiftSet] = {}

    @classmethod
    def in_process(cls, model: ModelGraph, probe_eps: float = 1e-8) -> "OracleHandle":
        return cls(
            lambda q: forward_label(model, q),
            argmax_id=model.argmax_id,
            n_classes=model.n_classes,
            probe_eps=probe_eps,
        )

    @property
    def count(self) -> int:
        return self._count

    @property
    def backend(self) -> Callable[[QueryInput], int]:
        return self._backend

    def query(self, v: QueryInput) -> int:
        """One label query.  The counter advances even if the backend fails."""
        with self._lock:
            self._count += 1
        return self._backend(v)

    def class_probe(self, c: int, eps: float | None = None) -> ShiftSet:
        """Shift adding ``eps`` to logit ``c`` (the tie-test nudge)."""
        eps = self.probe_eps if eps is None else eps
        key = (c, eps)
        probe = self._probe_cache.get(key)
        if probe is None:
            probe = ShiftSet.single(self.argmax_id, PRE, (self.n_classes,), c, eps)
            self._probe_cache[key] = probe
        return probe

    def is_critical(self, v: QueryInput, c1: int, c2: int, eps: float | None = None) -> bool:
        """True iff nudging logit c1 yields label c1 and nudging c2 yields c2.

        Exactly two queries, both always issued.
        """
        if c1 == c2:
            raise ValueError("is_critical needs two distinct classes")
        l1 = self.query(v.shifted(self.class_probe(c1, eps)))
        l2 = self.query(v.shifted(self.class_probe(c2, eps)))
        return l1 == c1 and l2 == c2


@dataclass
class CriticalPoint:
    """A query pinned to the decision boundary between classes c1 and c2.

    ``base`` is the query the boundary search started from, ``layer`` the
    boundary that was varied and ``boundary_shift`` the pre-side shift found
    there; ``v`` is the full query including the tie-polishing logit nudge.
    The constructor trusts the caller: search routines validate criticality
    with the two-probe test before building one.
    """

    v: QueryInput
    c1: int
    c2: int
    base: QueryInput
    layer: int
    boundary_shift: np.ndarray = field(repr=False, default=None)

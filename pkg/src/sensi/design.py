"""Matched-design data model, CSV ingestion and null-hypothesis adjustment.

A design holds ``I`` strata with ``n_i >= 2`` members each and ``K`` outcome
columns.  Rows are stored contiguously by stratum so that per-stratum
reductions are plain ``np.add.reduceat`` calls over ``ptr``.

Strata from a full match may contain one control and several treated units.
Those are canonicalized by swapping the labels inside the stratum and setting
the stratum's ``flipped`` flag; score builders negate the scores of flipped
strata so every downstream formula sees exactly one treated unit per stratum.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DesignError(ValueError):
    """Invalid input data (bad column, bad stratum, non-numeric value)."""


@dataclass(frozen=True)
class Stratum:
    """One matched set: treatment flags and a ``(n, K)`` outcome block."""

    treated: tuple[bool, ...]
    outcomes: tuple[tuple[float, ...], ...]
    flipped: bool = False

    @property
    def size(self) -> int:
        return len(self.treated)


def canonicalize(stratum: Stratum) -> Stratum:
    """Return the one-treated form of ``stratum``.

    A stratum with exactly one treated member is returned unchanged, so the
    operation is idempotent.  A stratum with one control and several treated
    members has its labels swapped and ``flipped`` set.
    """
    n_treated = sum(stratum.treated)
    n = stratum.size
    if n < 2:
        raise DesignError(f"stratum has {n} member(s); at least 2 required")
    if n_treated == 1:
        return stratum
    if n_treated == n - 1 and n_treated >= 2:
        return Stratum(
            treated=tuple(not z for z in stratum.treated),
            outcomes=stratum.outcomes,
            flipped=not stratum.flipped,
        )
    raise DesignError(
        f"stratum with {n_treated} treated of {n} members cannot be put in "
        "one-treated form"
    )


@dataclass(frozen=True, eq=False)
class MatchedDesign:
    """Validated matched design in flat, stratum-contiguous storage.

    ``treated`` is the canonical indicator (exactly one per stratum);
    ``flipped[i]`` records whether stratum ``i`` had its labels swapped.
    """

    outcomes: np.ndarray
    treated: np.ndarray
    ptr: np.ndarray
    flipped: np.ndarray
    outcome_names: tuple[str, ...] = ()
    stratum_ids: tuple[str, ...] = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        outcomes = np.asarray(self.outcomes, dtype=float)
        if outcomes.ndim == 1:
            outcomes = outcomes[:, None]
        treated = np.asarray(self.treated, dtype=bool)
        ptr = np.asarray(self.ptr, dtype=np.intp)
        flipped = np.asarray(self.flipped, dtype=bool)
        if ptr.ndim != 1 or len(ptr) < 2 or ptr[0] != 0:
            raise DesignError("no strata")
        sizes = np.diff(ptr)
        if np.any(sizes < 2):
            raise DesignError("every stratum needs at least 2 members")
        if ptr[-1] != len(treated) or len(outcomes) != len(treated):
            raise DesignError("row count does not match stratum offsets")
        if len(flipped) != len(sizes):
            raise DesignError("flipped flags must have one entry per stratum")
        if not np.all(np.isfinite(outcomes)):
            raise DesignError("outcomes must be finite")
        per_stratum = np.add.reduceat(treated.astype(int), ptr[:-1])
        if np.any(per_stratum != 1):
            bad = int(np.flatnonzero(per_stratum != 1)[0])
            raise DesignError(f"stratum {bad} does not have exactly one treated member")
        for arr in (outcomes, treated, ptr, flipped):
            arr.setflags(write=False)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "treated", treated)
        object.__setattr__(self, "ptr", ptr)
        object.__setattr__(self, "flipped", flipped)
        K = outcomes.shape[1]
        if not self.outcome_names:
            object.__setattr__(self, "outcome_names", tuple(f"y{k + 1}" for k in range(K)))
        if len(self.outcome_names) != K:
            raise DesignError("outcome_names must have one entry per outcome column")
        if not self.stratum_ids:
            object.__setattr__(self, "stratum_ids", tuple(str(i) for i in range(len(sizes))))

    @classmethod
    def from_strata(
        cls,
        strata: Sequence[Stratum],
        outcome_names: Sequence[str] = (),
        stratum_ids: Sequence[str] = (),
    ) -> "MatchedDesign":
        if not strata:
            raise DesignError("no strata")
        strata = [canonicalize(s) for s in strata]
        K = len(strata[0].outcomes[0])
        rows, treated, sizes = [], [], []
        for s in strata:
            if any(len(r) != K for r in s.outcomes) or len(s.outcomes) != s.size:
                raise DesignError("every member must carry exactly K outcome values")
            rows.extend(s.outcomes)
            treated.extend(s.treated)
            sizes.append(s.size)
        ptr = np.concatenate([[0], np.cumsum(sizes)])
        return cls(
            outcomes=np.array(rows, dtype=float).reshape(len(rows), K),
            treated=np.array(treated, dtype=bool),
            ptr=ptr,
            flipped=np.array([s.flipped for s in strata], dtype=bool),
            outcome_names=tuple(outcome_names),
            stratum_ids=tuple(stratum_ids),
        )

    @classmethod
    def pairs(cls, treated_outcomes, control_outcomes, outcome_names=()) -> "MatchedDesign":
        """Build a matched-pair design; member 0 of each pair is treated."""
        rt = np.asarray(treated_outcomes, dtype=float)
        rc = np.asarray(control_outcomes, dtype=float)
        if rt.ndim == 1:
            rt, rc = rt[:, None], rc[:, None]
        I, K = rt.shape
        outcomes = np.empty((2 * I, K))
        outcomes[0::2] = rt
        outcomes[1::2] = rc
        treated = np.zeros(2 * I, dtype=bool)
        treated[0::2] = True
        return cls(outcomes, treated, np.arange(0, 2 * I + 1, 2), np.zeros(I, bool),
                   outcome_names=tuple(outcome_names))

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.ptr)

    @property
    def I(self) -> int:  # noqa: E743
        return len(self.ptr) - 1

    @property
    def N(self) -> int:
        return len(self.treated)

    @property
    def K(self) -> int:
        return self.outcomes.shape[1]

    @property
    def member_stratum(self) -> np.ndarray:
        if "member_stratum" not in self._cache:
            self._cache["member_stratum"] = np.repeat(np.arange(self.I), self.sizes)
        return self._cache["member_stratum"]

    @property
    def is_paired(self) -> bool:
        return bool(np.all(self.sizes == 2))

    @property
    def actual_treated(self) -> np.ndarray:
        """Treatment indicator as recorded in the data (before flipping)."""
        return self.treated ^ self.flipped[self.member_stratum]

    @property
    def strata(self) -> list[Stratum]:
        out = []
        for i in range(self.I):
            lo, hi = self.ptr[i], self.ptr[i + 1]
            out.append(Stratum(
                treated=tuple(bool(z) for z in self.treated[lo:hi]),
                outcomes=tuple(tuple(float(v) for v in row) for row in self.outcomes[lo:hi]),
                flipped=bool(self.flipped[i]),
            ))
        return out

    def assignment_count(self) -> float:
        """``|Omega|``, the number of admissible treatment assignments."""
        return float(np.prod(self.sizes.astype(float)))

    def summary(self) -> dict:
        sizes = self.sizes
        return {
            "I": self.I,
            "N": self.N,
            "K": self.K,
            "outcomes": list(self.outcome_names),
            "stratum_sizes": {str(int(n)): int(c) for n, c in zip(*np.unique(sizes, return_counts=True))},
            "flipped_strata": int(self.flipped.sum()),
        }


@dataclass(frozen=True)
class ColumnSchema:
    outcomes: tuple[str, ...]
    stratum: str = "stratum"
    treated: str = "treated"


def load_design(path, schema: ColumnSchema) -> MatchedDesign:
    """Read a CSV file into a validated :class:`MatchedDesign`.

    Strata are ordered by first appearance, members by row order.
    """
    path = Path(path)
    if not schema.outcomes:
        raise DesignError("schema names no outcome columns")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (schema.stratum, schema.treated, *schema.outcomes):
            if col not in header:
                raise DesignError(f"missing column {col!r}")
        groups: dict[str, list[tuple[bool, tuple[float, ...]]]] = {}
        for lineno, row in enumerate(reader, start=2):
            sid = row[schema.stratum]
            if sid is None or sid.strip() == "":
                raise DesignError(f"row {lineno}, column {schema.stratum!r}: empty stratum id")
            z = (row[schema.treated] or "").strip()
            if z not in ("0", "1"):
                raise DesignError(
                    f"row {lineno}, column {schema.treated!r}: expected 0 or 1, got {z!r}")
            values = []
            for col in schema.outcomes:
                raw = (row[col] or "").strip()
                try:
                    v = float(raw)
                except ValueError:
                    raise DesignError(
                        f"row {lineno}, column {col!r}: non-numeric value {raw!r}") from None
                if not math.isfinite(v):
                    raise DesignError(f"row {lineno}, column {col!r}: non-finite value {raw!r}")
                values.append(v)
            groups.setdefault(sid.strip(), []).append((z == "1", tuple(values)))
    if not groups:
        raise DesignError("no strata")
    strata = []
    for sid, members in groups.items():
        try:
            strata.append(canonicalize(Stratum(
                treated=tuple(m[0] for m in members),
                outcomes=tuple(m[1] for m in members),
            )))
        except DesignError as exc:
            raise DesignError(f"stratum {sid!r}: {exc}") from None
    return MatchedDesign.from_strata(strata, schema.outcomes, tuple(groups))


@dataclass(frozen=True)
class HypothesisSpec:
    """Null hypothesis and alternative for one outcome.

    ``kind`` is ``"sharp"``, ``"additive"`` (shift ``value`` = tau) or
    ``"multiplicative"`` (ratio ``value`` = beta, tested on the log scale).
    """

    kind: str = "sharp"
    value: float = 0.0
    alternative: str = "two-sided"

    def __post_init__(self):
        if self.kind not in ("sharp", "additive", "multiplicative"):
            raise ValueError(f"unknown hypothesis kind {self.kind!r}")
        if self.alternative not in ("two-sided", "greater", "less"):
            raise ValueError(f"unknown alternative {self.alternative!r}")
        if not math.isfinite(self.value):
            raise ValueError("hypothesis parameter must be finite")
        if self.kind == "multiplicative" and self.value <= 0:
            raise ValueError("multiplicative effect must be positive")


def apply_hypothesis(design: MatchedDesign, specs) -> np.ndarray:
    """Adjusted responses ``F`` (N x K) under the hypothesized effects.

    Only members actually treated in the data are shifted.  Multiplicative
    nulls work on ``log R`` for every member.
    """
    if isinstance(specs, HypothesisSpec):
        specs = [specs] * design.K
    specs = list(specs)
    if len(specs) != design.K:
        raise ValueError(f"expected {design.K} hypothesis specs, got {len(specs)}")
    R = design.outcomes
    F = R.copy()
    z = design.actual_treated
    for k, spec in enumerate(specs):
        if spec.kind == "additive":
            F[z, k] -= spec.value
        elif spec.kind == "multiplicative":
            if np.any(R[:, k] <= 0):
                raise DesignError(
                    f"outcome {design.outcome_names[k]!r}: multiplicative null needs positive values")
            F[:, k] = np.log(R[:, k])
            F[z, k] -= math.log(spec.value)
    return F

"""Sum statistics ``t_k = sum_ij Z_ij q_ijk`` and their fixed scores.

Every builder returns the raw score column for the data's own labels; the
:func:`score_matrix` wrapper negates scores of flipped strata so the stored
matrix is in one-treated form.  Adding the constant ``sum_j q_ij`` of a
flipped stratum to both the statistic and its mean leaves every deviate
unchanged, so that constant is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .design import MatchedDesign

STATISTICS = ("mean-difference", "aligned-rank", "signed-rank", "huber")


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Scores ``q`` (N x K), observed statistics and statistic names."""

    q: np.ndarray
    t_obs: np.ndarray
    kinds: tuple[str, ...]

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim == 1:
            q = q[:, None]
        if not np.all(np.isfinite(q)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t_obs", np.atleast_1d(np.asarray(self.t_obs, dtype=float)))

    @property
    def K(self) -> int:
        return self.q.shape[1]

    def column(self, k: int) -> np.ndarray:
        return self.q[:, k]

    def subset(self, ks) -> "ScoreMatrix":
        ks = list(ks)
        return ScoreMatrix(self.q[:, ks], self.t_obs[ks], tuple(self.kinds[k] for k in ks))

    @classmethod
    def from_design(cls, design: MatchedDesign, q, kinds=None) -> "ScoreMatrix":
        """Wrap canonical scores, computing ``t_obs`` from the treated rows."""
        q = np.asarray(q, dtype=float)
        if q.ndim == 1:
            q = q[:, None]
        kinds = tuple(kinds) if kinds else ("custom",) * q.shape[1]
        return cls(q, q[design.treated].sum(axis=0), kinds)


def _require_pairs(design: MatchedDesign, name: str) -> None:
    if not design.is_paired:
        raise ValueError(f"{name} requires a matched-pair design")


def scores_mean_difference(F: np.ndarray, design: MatchedDesign) -> np.ndarray:
    """``q_ij = sum_{j' != j} (F_ij - F_ij') / (I (n_i - 1))``."""
    F = np.asarray(F, dtype=float)
    n = design.sizes[design.member_stratum]
    totals = np.add.reduceat(F, design.ptr[:-1])[design.member_stratum]
    return (n * F - totals) / (design.I * (n - 1))


def scores_aligned_rank(F: np.ndarray, design: MatchedDesign) -> np.ndarray:
    """Midranks 1..N of responses aligned by their stratum mean."""
    F = np.asarray(F, dtype=float)
    means = np.add.reduceat(F, design.ptr[:-1]) / design.sizes
    aligned = F - means[design.member_stratum]
    # round away float noise from the alignment so genuine ties stay tied
    scale = max(float(np.max(np.abs(F))), 1.0)
    aligned = np.round(aligned / scale, 12)
    return rankdata(aligned, method="average")


def scores_signed_rank(F: np.ndarray, design: MatchedDesign) -> np.ndarray:
    """Wilcoxon signed-rank scores ``q_ij = d_i 1{F_ij > F_ij'}``.

    Zero differences get ``d_i = 0`` and are left out of the ranking.
    """
    _require_pairs(design, "signed-rank statistic")
    F = np.asarray(F, dtype=float)
    f1, f2 = F[0::2], F[1::2]
    absdiff = np.abs(f1 - f2)
    d = np.zeros_like(absdiff)
    nz = absdiff > 0
    d[nz] = rankdata(absdiff[nz], method="average")
    q = np.empty_like(F)
    q[0::2] = d * (f1 > f2)
    q[1::2] = d * (f2 > f1)
    return q


def huber_psi(x, trunc: float = 2.5):
    """``psi(x) = sign(x) min(|x|, trunc)`` with ``sign(0) = 0``."""
    return np.clip(x, -trunc, trunc)


def scores_huber_m(F: np.ndarray, design: MatchedDesign, trunc: float = 2.5) -> np.ndarray:
    """Huber M-statistic scores for matched pairs.

    ``D_i = F_i1 - F_i2`` in the pair's member order and ``s`` is the median
    of ``|D_i|``; member 1 scores ``psi(D_i/s)``, member 2 ``psi(-D_i/s)``.
    """
    _require_pairs(design, "Huber M-statistic")
    F = np.asarray(F, dtype=float)
    D = F[0::2] - F[1::2]
    s = float(np.median(np.abs(D)))
    if s <= 0:
        raise ValueError("Huber scale is zero: more than half of the pair differences vanish")
    q = np.empty_like(F)
    q[0::2] = huber_psi(D / s, trunc)
    q[1::2] = huber_psi(-D / s, trunc)
    return q


_BUILDERS = {
    "mean-difference": scores_mean_difference,
    "aligned-rank": scores_aligned_rank,
    "signed-rank": scores_signed_rank,
    "huber": scores_huber_m,
}


def score_matrix(design: MatchedDesign, F: np.ndarray, kinds, trunc: float = 2.5) -> ScoreMatrix:
    """Build the canonical :class:`ScoreMatrix` for adjusted responses ``F``.

    ``kinds`` is one statistic name or one name per outcome.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    if isinstance(kinds, str):
        kinds = [kinds] * F.shape[1]
    kinds = tuple(kinds)
    if len(kinds) != F.shape[1]:
        raise ValueError("need one statistic per outcome")
    q = np.empty_like(F)
    for k, kind in enumerate(kinds):
        if kind not in _BUILDERS:
            raise ValueError(f"unknown statistic {kind!r}; choose from {STATISTICS}")
        if kind == "huber":
            q[:, k] = scores_huber_m(F[:, k], design, trunc)
        else:
            q[:, k] = _BUILDERS[kind](F[:, k], design)
    sign = np.where(design.flipped[design.member_stratum], -1.0, 1.0)
    return ScoreMatrix.from_design(design, q * sign[:, None], kinds)

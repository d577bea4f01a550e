"""Normative Z-scoring against age-bracket reference statistics and the
rank-based AUC for group separation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class NormativeError(Exception):
    """Missing or degenerate reference bracket."""


@dataclass
class AgeBracketNorms:
    """Per-vertex mean and unbiased SD per age bracket.

    Brackets are half-open intervals of ``width`` years aligned to
    ``origin``; the default covers [60, 70), [70, 80), ... for any age.
    """

    width: float = 10.0
    origin: float = 0.0
    table: dict = field(default_factory=dict)  # bracket index -> (mu, sd, n)

    def bracket_of(self, age: float) -> int:
        return int(np.floor((age - self.origin) / self.width))

    def bracket_range(self, index: int) -> tuple[float, float]:
        lo = self.origin + index * self.width
        return lo, lo + self.width


def zscore_norms(
    ages,
    values,
    bracket_width: float = 10.0,
    origin: float = 0.0,
) -> AgeBracketNorms:
    """Reference statistics from a cohort of initial scans.

    ``ages`` is (n,) and ``values`` is (n, V): one per-vertex measurement
    row per reference subject. Each occupied bracket stores its per-vertex
    mean, unbiased SD, and subject count; degeneracy (singleton brackets,
    zero spread) surfaces when the bracket is queried, not here.
    """
    a = np.asarray(ages, dtype=np.float64)
    v = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if len(a) != len(v):
        raise NormativeError("one age per reference row required")
    norms = AgeBracketNorms(width=float(bracket_width), origin=float(origin))
    idx = np.floor((a - norms.origin) / norms.width).astype(int)
    for b in np.unique(idx):
        rows = v[idx == b]
        n = len(rows)
        mu = rows.mean(axis=0)
        sd = rows.std(axis=0, ddof=1) if n >= 2 else np.full(v.shape[1], np.nan)
        norms.table[int(b)] = (mu, sd, n)
    return norms


def zscore(values, age: float, norms: AgeBracketNorms, exclude=None):
    """Per-vertex Z-scores against the subject's age bracket plus the mean
    Z over the non-excluded vertices.

    ``exclude`` is an optional boolean mask of vertices to leave out of
    the average (e.g. an unlabeled medial region). Raises when the bracket
    is missing, has fewer than two reference subjects, or has zero spread
    at any vertex that enters the average.
    """
    x = np.asarray(values, dtype=np.float64)
    b = norms.bracket_of(age)
    if b not in norms.table:
        lo, hi = norms.bracket_range(b)
        raise NormativeError(
            f"no reference bracket for age {age:g} (bracket [{lo:g}, {hi:g}))"
        )
    mu, sd, n = norms.table[b]
    if n < 2:
        lo, hi = norms.bracket_range(b)
        raise NormativeError(
            f"bracket [{lo:g}, {hi:g}) has a single reference subject"
        )
    if exclude is None:
        keep = np.ones(len(x), dtype=bool)
    else:
        keep = ~np.asarray(exclude, dtype=bool)
    if not keep.any():
        raise NormativeError("every vertex excluded from the average")
    if (sd[keep] == 0).any():
        raise NormativeError(
            "zero reference SD: z-score undefined in this bracket"
        )
    with np.errstate(invalid="ignore", divide="ignore"):
        z = (x - mu) / sd
    return z, float(z[keep].mean())


def auc(scores, groups) -> float:
    """Mann-Whitney area under the curve.

    Probability that a random case scores above a random control, counting
    ties as one half; both groups must be non-empty.
    """
    s = np.asarray(scores, dtype=np.float64)
    g = np.asarray(groups).astype(bool)
    n_case = int(g.sum())
    n_ctrl = int((~g).sum())
    if n_case == 0 or n_ctrl == 0:
        raise ValueError("both groups must be non-empty")
    ranks = rankdata(s)  # average ranks handle ties exactly
    u = ranks[g].sum() - n_case * (n_case + 1) / 2.0
    return float(u / (n_case * n_ctrl))

"""Frequency permutation alignment for per-frequency source masks.

Masks estimated independently at each frequency carry an arbitrary source
labeling per frequency.  This module restores a globally consistent labeling
by exploiting the fact that a source's activity envelope is correlated
across frequencies: the per-source mask sequences of every frequency are
matched, via Pearson correlation over valid frames, against global centroid
sequences, followed by local refinement sweeps that additionally reward
agreement between neighbouring frequencies.

The alternation is a spherical-k-means-style coordinate ascent on

    J(perm, c) = sum_f <x[f, perm_f(j)], c_j>
               + w * sum_f <x[f, perm_f(j)], x[f+1, perm_{f+1}(j)]>

where ``x`` are the frame sequences standardized over their valid frames
(so inner products are Pearson correlations) and the unit-norm centroids
``c`` are profiled out exactly by normalized averaging.  Every accepted
update increases ``J`` or leaves it unchanged, so the recorded objective
trace is non-decreasing during refinement.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .validation import check_positive_int, check_real_array

__all__ = [
    "AlignmentConfig",
    "MaskTensor",
    "PermutationMap",
    "align_permutations",
    "apply_permutations",
]

# Row sums of valid bins must match 1, and invalid bins the uniform mask,
# to this absolute tolerance.
_MASK_TOL = 1e-12

# Standardized activity sequences with an L2 norm below this are treated as
# constant (carrying no correlation information) and zeroed out.
_ACTIVITY_TOL = 1e-12

# Largest source count for which per-frequency permutations are chosen by
# exhaustive enumeration; beyond it the assignment problem is solved by the
# Hungarian method with a small identity bias for tie-breaking.
_MAX_ENUMERATION_SOURCES = 6


@dataclass(frozen=True)
class AlignmentConfig:
    """Settings for the correlation-based alignment.

    ``n_refinement_sweeps`` local sweeps follow the single global centroid
    pass; each refinement sweep mixes centroid correlation with
    neighbour-frequency agreement weighted by ``neighbor_weight``.  The
    total number of sweeps (global pass included) never exceeds
    ``max_sweeps``.
    """

    n_refinement_sweeps: int = 3
    neighbor_weight: float = 0.3
    max_sweeps: int = 20

    def __post_init__(self):
        check_positive_int(self.n_refinement_sweeps, "n_refinement_sweeps", minimum=0)
        check_positive_int(self.max_sweeps, "max_sweeps", minimum=1)
        if not 0.0 <= float(self.neighbor_weight) < np.inf:
            raise ValueError("neighbor_weight must be a finite nonnegative number")
        if 1 + self.n_refinement_sweeps > self.max_sweeps:
            raise ValueError(
                "global pass plus refinement sweeps must not exceed max_sweeps"
            )


@dataclass
class MaskTensor:
    """Per-source soft masks, ``gamma`` with shape ``(sources, frames, bins)``.

    ``valid`` has shape ``(frames, bins)``.  On valid bins the mask values
    of each time-frequency slot sum to one; invalid bins hold the uniform
    mask ``1/sources``.
    """

    gamma: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.gamma = check_real_array(self.gamma, "gamma", ndim=3)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.gamma.shape[1:]:
            raise ValueError("valid mask shape must match (frames, bins)")
        n = self.gamma.shape[0]
        if n < 1:
            raise ValueError("mask tensor needs at least one source")
        sums = self.gamma.sum(axis=0)
        if sums[self.valid].size and np.max(np.abs(sums[self.valid] - 1.0)) > _MASK_TOL:
            raise ValueError("mask values on valid bins must sum to one")
        invalid = ~self.valid
        if invalid.any():
            dev = np.abs(self.gamma[:, invalid] - 1.0 / n)
            if np.max(dev) > _MASK_TOL:
                raise ValueError("invalid bins must hold the uniform mask")

    @property
    def n_sources(self):
        return self.gamma.shape[0]

    @property
    def n_frames(self):
        return self.gamma.shape[1]

    @property
    def n_bins(self):
        return self.gamma.shape[2]


@dataclass
class PermutationMap:
    """One source permutation per frequency, shape ``(bins, sources)``.

    Row ``f`` lists, for every output slot ``j``, the input source index
    ``perm[f, j]`` that the slot takes at frequency ``f``.  Each row is a
    bijection on ``0..sources-1``.  ``objective_trace`` records the
    alignment objective after the global pass and after each refinement
    sweep when the map was produced by :func:`align_permutations`.
    """

    perm: np.ndarray
    objective_trace: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.perm = np.asarray(self.perm)
        if self.perm.ndim != 2:
            raise ValueError("perm must be a (bins, sources) array")
        if not np.issubdtype(self.perm.dtype, np.integer):
            raise ValueError("perm must hold integers")
        self.perm = self.perm.astype(np.intp, copy=False)
        n = self.perm.shape[1]
        if np.any(np.sort(self.perm, axis=1) != np.arange(n)):
            raise ValueError("every row of perm must be a permutation")
        if self.objective_trace is not None:
            self.objective_trace = check_real_array(
                np.asarray(self.objective_trace, dtype=np.float64),
                "objective_trace",
                ndim=1,
            )

    @property
    def n_bins(self):
        return self.perm.shape[0]

    @property
    def n_sources(self):
        return self.perm.shape[1]

    def is_identity(self):
        return bool(np.all(self.perm == np.arange(self.n_sources)))

    def inverse(self):
        """Map undoing this one: applying both in sequence is the identity."""
        return PermutationMap(np.argsort(self.perm, axis=1, kind="stable"))


def _standardized_activity(masks):
    """Zero-filled, per-frequency standardized mask sequences.

    Returns ``x`` with shape ``(sources, frames, bins)`` where each
    ``x[j, :, f]`` is the mask sequence of source ``j`` at frequency ``f``,
    mean-centered over the frames valid at ``f`` and scaled to unit L2 norm
    (zero elsewhere).  Inner products of two such sequences accumulate a
    Pearson correlation over jointly valid frames.
    """
    gamma = masks.gamma
    valid = masks.valid
    x = np.zeros_like(gamma, dtype=np.float64)
    for f in range(masks.n_bins):
        frames = valid[:, f]
        if not frames.any():
            continue
        seq = gamma[:, frames, f].astype(np.float64)
        seq = seq - seq.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(seq, axis=1, keepdims=True)
        scale = np.where(norms > _ACTIVITY_TOL, norms, np.inf)
        x[:, frames, f] = seq / scale
    return x


def _centroids(x, perm):
    """Unit-norm per-source centroid sequences of the aligned activity."""
    aligned = _aligned_activity(x, perm)
    mean = aligned.sum(axis=2)
    norms = np.linalg.norm(mean, axis=1, keepdims=True)
    scale = np.where(norms > _ACTIVITY_TOL, norms, np.inf)
    return mean / scale


def _aligned_activity(x, perm):
    """Gather ``x`` under ``perm``: result ``[j, :, f] = x[perm[f, j], :, f]``."""
    xs = np.moveaxis(x, 2, 0)  # (bins, sources, frames)
    aligned = np.take_along_axis(xs, perm[:, :, None], axis=1)
    return np.moveaxis(aligned, 0, 2)


def _neighbor_similarity(x):
    """Correlations between adjacent frequencies, ``(bins-1, k, l)`` where
    entry ``[f, k, l]`` correlates source ``k`` at ``f`` with ``l`` at ``f+1``."""
    if x.shape[2] < 2:
        return np.zeros((0, x.shape[0], x.shape[0]))
    return np.einsum("ktf,ltf->fkl", x[:, :, :-1], x[:, :, 1:])


def _objective(x, perm, centroid, pair_sim, weight):
    aligned = _aligned_activity(x, perm)
    value = float(np.einsum("jtf,jt->", aligned, centroid))
    if weight > 0.0 and pair_sim.shape[0]:
        left = perm[:-1]
        right = perm[1:]
        pair = pair_sim[np.arange(pair_sim.shape[0])[:, None], left, right]
        value += weight * float(pair.sum())
    return value


def _choose_permutation(score, candidates):
    """Permutation maximizing ``sum_j score[j, perm[j]]``.

    Enumeration lists the identity first and accepts only strict
    improvements, so exact ties resolve toward the identity (then toward
    lexicographic order).
    """
    if candidates is not None:
        gains = score[np.arange(score.shape[0])[None, :], candidates].sum(axis=1)
        return candidates[int(np.argmax(gains))]
    bias = np.zeros_like(score)
    scale = np.max(np.abs(score))
    np.fill_diagonal(bias, 1e-12 * (scale if scale > 0 else 1.0))
    rows, cols = linear_sum_assignment(score + bias, maximize=True)
    return cols[np.argsort(rows)]


def _sweep(x, perm, centroid, pair_sim, weight, candidates):
    """One ascending pass of per-frequency permutation updates (in place)."""
    n_bins = x.shape[2]
    cent_sim = np.einsum("jt,ktf->fjk", centroid, x)
    changed = False
    for f in range(n_bins):
        score = cent_sim[f].copy()
        if weight > 0.0:
            if f > 0:
                score += weight * pair_sim[f - 1][perm[f - 1], :]
            if f + 1 < n_bins:
                score += weight * pair_sim[f][:, perm[f + 1]].T
        new = _choose_permutation(score, candidates)
        if np.any(new != perm[f]):
            changed = True
            perm[f] = new
    return changed


def align_permutations(masks, config=None):
    """Find per-frequency source permutations that make masks consistent.

    Runs one global centroid pass followed by ``config.n_refinement_sweeps``
    refinement sweeps that add neighbour-frequency agreement; the returned
    map records the refinement objective trace, which is non-decreasing.
    Frequencies without any valid frame keep the identity permutation.
    """
    if not isinstance(masks, MaskTensor):
        raise TypeError("masks must be a MaskTensor")
    if config is None:
        config = AlignmentConfig()
    n = masks.n_sources
    if n < 2:
        raise ValueError("alignment needs at least two sources")
    n_bins = masks.n_bins

    x = _standardized_activity(masks)
    pair_sim = _neighbor_similarity(x)
    if n <= _MAX_ENUMERATION_SOURCES:
        candidates = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    else:
        candidates = None

    perm = np.tile(np.arange(n, dtype=np.intp), (n_bins, 1))

    # Global pass: centroid correlation only.
    centroid = _centroids(x, perm)
    _sweep(x, perm, centroid, pair_sim, 0.0, candidates)

    # Refinement: centroid plus neighbour agreement, coordinate ascent.
    weight = float(config.neighbor_weight)
    centroid = _centroids(x, perm)
    trace = [_objective(x, perm, centroid, pair_sim, weight)]
    for _ in range(min(config.n_refinement_sweeps, config.max_sweeps - 1)):
        changed = _sweep(x, perm, centroid, pair_sim, weight, candidates)
        centroid = _centroids(x, perm)
        trace.append(_objective(x, perm, centroid, pair_sim, weight))
        if not changed:
            break

    return PermutationMap(perm, objective_trace=np.asarray(trace))


def apply_permutations(masks, perm_map):
    """Relabel mask sources per frequency according to ``perm_map``."""
    if not isinstance(masks, MaskTensor):
        raise TypeError("masks must be a MaskTensor")
    if not isinstance(perm_map, PermutationMap):
        raise TypeError("perm_map must be a PermutationMap")
    if perm_map.n_bins != masks.n_bins or perm_map.n_sources != masks.n_sources:
        raise ValueError("permutation map shape does not match the mask tensor")
    gs = np.moveaxis(masks.gamma, 2, 0)  # (bins, sources, frames)
    gathered = np.take_along_axis(gs, perm_map.perm[:, :, None], axis=1)
    return MaskTensor(np.moveaxis(gathered, 0, 2).copy(), masks.valid.copy())

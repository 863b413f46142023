"""Graph-matching part alignment against a reference correlation matrix.

Incoming parts are re-ordered by the permutation that brings their cosine
correlation matrix closest (negative Frobenius distance) to a reference
matrix kept in memory across training steps. The permutation is a plain
re-indexing: no gradient flows through the choice itself.

Convention: ``reorder_parts(parts, pi)`` puts input row ``pi[n]`` at output
row ``n``, so the reordered correlation is ``C[pi][:, pi]`` (``P C P^T`` with
``P[n, pi[n]] = 1``). ``best_permutation`` returns the ``pi`` that makes that
reordered matrix most similar to the reference.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from PartAlign.align_attention import PartTokens
from PartAlign.errors import NonFiniteError, ShapeMismatchError
from PartAlign.tensor_core import Tensor, gather_rows

logger = logging.getLogger(__name__)

MAX_EXACT_PARTS = 8

MatchingMode = Literal["exact", "greedy"]


@dataclass(frozen=True)
class Permutation:
    mapping: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ValueError(f"Not a permutation of 0..{len(self.mapping) - 1}: {self.mapping}")

    @classmethod
    def identity(cls, size: int) -> "Permutation":
        return cls(tuple(range(size)))

    def __len__(self) -> int:
        return len(self.mapping)

    def inverse(self) -> "Permutation":
        inverse = [0] * len(self.mapping)
        for position, source in enumerate(self.mapping):
            inverse[source] = position
        return Permutation(tuple(inverse))

    def compose(self, other: "Permutation") -> "Permutation":
        """Permutation equal to reordering by ``self`` first, then by ``other``."""
        if len(other) != len(self):
            raise ShapeMismatchError("Permutation.compose", (len(self),), (len(other),))
        return Permutation(tuple(self.mapping[i] for i in other.mapping))

    def as_matrix(self) -> np.ndarray:
        matrix = np.zeros((len(self), len(self)))
        matrix[np.arange(len(self)), self.mapping] = 1.0
        return matrix


@dataclass
class CorrelationBank:
    """Reference part correlation kept in memory across training steps (EMA)."""

    num_parts: int
    ema_rate: float = 0.1
    c_ref: np.ndarray | None = None
    updates_seen: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ema_rate <= 1.0:
            raise ValueError(f"ema_rate must lie in [0, 1], got {self.ema_rate}")

    def update(self, c_aligned: np.ndarray) -> None:
        bank_update(self, c_aligned)


def _token_rows(parts: PartTokens | Tensor | np.ndarray) -> np.ndarray:
    if isinstance(parts, PartTokens):
        parts = parts.tokens
    if isinstance(parts, Tensor):
        parts = parts.data
    return np.asarray(parts, dtype=np.float64)


def correlation(parts: PartTokens | Tensor | np.ndarray) -> np.ndarray:
    """Cosine similarity between every pair of part rows ([N, d] or batched [..., N, d])."""
    rows = _token_rows(parts)
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    if not np.all(np.isfinite(rows)) or np.any(norms == 0):
        raise NonFiniteError("correlation", "Cosine correlation is undefined for non-finite or zero-norm part rows.")
    unit = rows / norms
    matrix = np.clip(unit @ np.swapaxes(unit, -1, -2), -1.0, 1.0)
    matrix = 0.5 * (matrix + np.swapaxes(matrix, -1, -2))
    diagonal = np.arange(matrix.shape[-1])
    matrix[..., diagonal, diagonal] = 1.0
    return matrix


def similarity(c_a: np.ndarray, c_b: np.ndarray) -> float:
    c_a, c_b = np.asarray(c_a, dtype=np.float64), np.asarray(c_b, dtype=np.float64)
    if c_a.shape != c_b.shape:
        raise ShapeMismatchError("similarity", c_a.shape, c_b.shape)
    return -float(np.sqrt(np.sum((c_a - c_b) ** 2)))


def _exact_permutation(c_in: np.ndarray, c_ref: np.ndarray) -> Permutation:
    size = c_in.shape[0]
    # itertools.permutations enumerates in lexicographic order; argmax keeps the first maximum
    candidates = np.array(list(itertools.permutations(range(size))), dtype=np.int64)
    permuted = c_in[candidates[:, :, None], candidates[:, None, :]]
    distances = np.sqrt(np.sum((permuted - c_ref) ** 2, axis=(1, 2)))
    # summation order differs between candidates; rounding keeps mathematical ties tied
    distances = np.round(distances, decimals=10)
    return Permutation(tuple(int(i) for i in candidates[int(np.argmin(distances))]))


def _arrangement_cost(c_in: np.ndarray, c_ref: np.ndarray, mapping: Sequence[int]) -> float:
    index = np.asarray(mapping)
    return round(float(np.sum((c_in[np.ix_(index, index)] - c_ref) ** 2)), 10)


def _greedy_fill(c_in: np.ndarray, c_ref: np.ndarray, chosen: list[int]) -> list[int]:
    chosen = list(chosen)
    remaining = [i for i in range(c_in.shape[0]) if i not in chosen]
    while remaining:
        position = len(chosen)
        best_index, best_cost = remaining[0], np.inf
        for candidate in remaining:
            trial = chosen + [candidate]
            block = c_in[np.ix_(trial, trial)]
            cost = round(float(np.sum((block - c_ref[: position + 1, : position + 1]) ** 2)), 10)
            if cost < best_cost:
                best_index, best_cost = candidate, cost
        chosen.append(best_index)
        remaining.remove(best_index)
    return chosen


def _swap_descent(c_in: np.ndarray, c_ref: np.ndarray, mapping: list[int]) -> tuple[list[int], float]:
    cost = _arrangement_cost(c_in, c_ref, mapping)
    improved = True
    while improved:
        improved = False
        for a, b in itertools.combinations(range(len(mapping)), 2):
            trial = list(mapping)
            trial[a], trial[b] = trial[b], trial[a]
            trial_cost = _arrangement_cost(c_in, c_ref, trial)
            if trial_cost < cost:
                mapping, cost, improved = trial, trial_cost, True
    return mapping, cost


def _greedy_permutation(c_in: np.ndarray, c_ref: np.ndarray) -> Permutation:
    size = c_in.shape[0]
    # a lone first row always matches the unit diagonal, so start from every ordered pair
    starts = [[i, j] for i in range(size) for j in range(size) if i != j] or [[]]
    best_mapping, best_cost = None, np.inf
    for start in starts:
        mapping, cost = _swap_descent(c_in, c_ref, _greedy_fill(c_in, c_ref, start))
        if cost < best_cost:
            best_mapping, best_cost = mapping, cost
    return Permutation(tuple(best_mapping))


def best_permutation(c_in: np.ndarray, c_ref: np.ndarray, mode: MatchingMode = "exact") -> Permutation:
    """Permutation ``pi`` maximizing ``similarity(c_in[pi][:, pi], c_ref)``.

    Exact mode enumerates all N! candidates (N <= 8) and breaks ties toward
    the lexicographically smallest mapping. Greedy mode seeds the first two
    output rows with every ordered pair of input rows, fills the remaining
    rows one at a time with the input row that keeps the partial block
    closest to the reference, then applies improving pairwise swaps. The
    cheapest result wins; ties go to the earliest seed pair and the lowest
    input index.
    """
    c_in, c_ref = np.asarray(c_in, dtype=np.float64), np.asarray(c_ref, dtype=np.float64)
    if c_in.shape != c_ref.shape or c_in.ndim != 2 or c_in.shape[0] != c_in.shape[1]:
        raise ShapeMismatchError("best_permutation", c_in.shape, c_ref.shape)
    if mode == "exact":
        if c_in.shape[0] > MAX_EXACT_PARTS:
            raise ValueError(f"Exact matching supports at most {MAX_EXACT_PARTS} parts, got {c_in.shape[0]}")
        return _exact_permutation(c_in, c_ref)
    if mode == "greedy":
        return _greedy_permutation(c_in, c_ref)
    raise ValueError(f"Unknown matching mode: {mode}")


def best_permutations(c_batch: np.ndarray, bank: CorrelationBank, mode: MatchingMode = "exact") -> list[Permutation]:
    """Per-sample permutations for a batch of correlations; identity while the bank is empty."""
    if bank.c_ref is None:
        return [Permutation.identity(c_batch.shape[-1]) for _ in range(c_batch.shape[0])]
    return [best_permutation(c_in, bank.c_ref, mode) for c_in in c_batch]


def reorder_parts(parts: PartTokens, pi: Permutation | Sequence[Permutation]) -> PartTokens:
    """Row ``n`` of the result is row ``pi[n]`` of the input; batched input takes one permutation per sample."""
    tokens = parts.tokens
    if isinstance(pi, Permutation):
        if len(pi) != parts.num_parts or tokens.ndim != 2:
            raise ShapeMismatchError("reorder_parts", tokens.shape, (len(pi),))
        index = np.asarray(pi.mapping)
    else:
        if tokens.ndim != 3 or len(pi) != tokens.shape[0] or any(len(p) != parts.num_parts for p in pi):
            raise ShapeMismatchError("reorder_parts", tokens.shape, (len(pi),))
        index = np.asarray([p.mapping for p in pi])
    return PartTokens(stage=parts.stage, tokens=gather_rows(tokens, index))


def bank_update(bank: CorrelationBank, c_aligned: np.ndarray) -> None:
    c_aligned = np.asarray(c_aligned, dtype=np.float64)
    if c_aligned.shape != (bank.num_parts, bank.num_parts):
        raise ShapeMismatchError("bank_update", c_aligned.shape, (bank.num_parts, bank.num_parts))
    if bank.c_ref is None:
        bank.c_ref = c_aligned.copy()
    else:
        bank.c_ref = (1.0 - bank.ema_rate) * bank.c_ref + bank.ema_rate * c_aligned
    bank.updates_seen += 1
    logger.debug(f"Correlation bank update {bank.updates_seen}")


def greedy_optimality_gap(instances: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean ratio of greedy to exact similarity over (c_in, c_ref) pairs (1.0 means greedy matched exact).

    Similarities are negated distances; the ratio is taken on the
    corresponding closeness scores ``1 / (1 + distance)``.
    """
    ratios = []
    for c_in, c_ref in instances:
        exact = best_permutation(c_in, c_ref, "exact").mapping
        greedy = best_permutation(c_in, c_ref, "greedy").mapping
        exact_score = 1.0 / (1.0 - similarity(c_in[np.ix_(exact, exact)], c_ref))
        greedy_score = 1.0 / (1.0 - similarity(c_in[np.ix_(greedy, greedy)], c_ref))
        ratios.append(greedy_score / exact_score)
    return float(np.mean(ratios))

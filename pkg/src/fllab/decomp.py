"""Compressed parameterizations of per-layer weight updates.

A layer's update delta (shape m x n) can be carried by one of six
parameterizations:

* ``dense_update``   -- the delta itself; no compression.
* ``lowrank``        -- U V^T with U (m, r), V (n, r).
* ``lowrank_aad``    -- U Vf^T + Uf V^T where Uf, Vf are randomly drawn once
                        and stay fixed; U, V start at zero.  The delta is
                        *linear* in the trainables, so averaging factors
                        across clients equals averaging the recovered
                        deltas exactly.
* ``frozen_lowrank`` -- Uf V^T with Uf fixed; only V trains.  The other
                        route to aggregation-exactness, at a different
                        trainable budget.
* ``bkd``            -- the target is covered by a k x k grid of blocks,
                        each the Kronecker product of two z x z factors;
                        the assembled (k z^2)^2 matrix is truncated
                        row-major to (m, n).  Full target rank is reachable
                        with ~2 k sqrt(mn) parameters.
* ``bkd_aad``        -- per-block U (x) Vf + Uf (x) V with fixed Uf, Vf
                        grids; linear in trainables like ``lowrank_aad``.

Fixed ("_fixed") arrays are never touched by gradient steps, are identical
across clients within a round (they travel as a seed, not as payload), and
are excluded from parameter counts.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .rng import Rng

SCHEMES = (
    "dense_update",
    "lowrank",
    "lowrank_aad",
    "frozen_lowrank",
    "bkd",
    "bkd_aad",
)


class AggregationError(ValueError):
    """Updates of mixed kinds or shapes cannot be averaged."""


class ProtocolError(RuntimeError):
    """Fixed matrices disagree across clients; the shared-seed contract broke."""


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LowRankShape:
    m: int
    n: int
    r: int

    def __post_init__(self):
        if not 1 <= self.r <= min(self.m, self.n):
            raise ValueError(f"rank {self.r} outside [1, min({self.m}, {self.n})]")


@dataclass(frozen=True)
class BkdShape:
    m: int
    n: int
    k: int
    z: int
    over_budget: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.z != _z_rule(self.m, self.n, self.k):
            raise ValueError(
                f"z={self.z} violates the side-length rule for "
                f"m={self.m}, n={self.n}, k={self.k}"
            )

    @property
    def assembled_side(self) -> int:
        return self.k * self.z * self.z


def _z_rule(m: int, n: int, k: int) -> int:
    """Smallest z with (k z^2)^2 >= m n, i.e. ceil((mn / k^2)^(1/4)) computed
    with exact integer comparisons."""
    z = max(1, int((m * n / k**2) ** 0.25) - 2)
    while k * k * z**4 < m * n:
        z += 1
    return z


def rank_for_ratio(m: int, n: int, ratio: float) -> int:
    """Largest r with 2 (m + n) r <= ratio * m * n, clamped to [1, min(m, n)].

    The budget uses the bidirectional-traffic convention 2 (m + n) r; the
    count of trainable scalars is (m + n) r.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    budget = ratio * m * n
    per_rank = 2 * (m + n)
    r = max(1, int(budget // per_rank))
    while per_rank * (r + 1) <= budget:
        r += 1
    while r > 1 and per_rank * r > budget:
        r -= 1
    return min(r, min(m, n))


def blocks_for_ratio(m: int, n: int, ratio: float) -> BkdShape:
    """Largest k whose actual trainable count 2 k^2 z^2 fits ratio * m * n.

    Scans k downward from floor(ratio * sqrt(mn) / 2) + 1 (no larger k can
    fit, since 2 k^2 z^2 >= 2 k sqrt(mn)) and takes the first k within
    budget.  If even k = 1 exceeds the budget the shape is returned with
    ``over_budget`` set.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    budget = ratio * m * n
    start = int(ratio * math.sqrt(m * n) / 2) + 1
    for k in range(start, 0, -1):
        z = _z_rule(m, n, k)
        if 2 * k * k * z * z <= budget:
            return BkdShape(m, n, k, z)
    return BkdShape(m, n, 1, _z_rule(m, n, 1), over_budget=True)


def frozen_rank_for_budget(m: int, n: int, r: int) -> int:
    """Rank for the frozen variant matching the (m + n) r trainable budget
    of a decoupled update of rank r: the nearest integer to (m + n) r / n
    (half rounds up), clamped to [1, min(m, n)]."""
    r_f = ((m + n) * r + n // 2) // n
    return max(1, min(r_f, min(m, n)))


# ---------------------------------------------------------------------------
# update kinds
# ---------------------------------------------------------------------------


@dataclass
class DenseUpdate:
    delta: np.ndarray


@dataclass
class LowRankUpdate:
    u: np.ndarray  # (m, r)
    v: np.ndarray  # (n, r)


@dataclass
class DecoupledLowRank:
    u: np.ndarray
    v: np.ndarray
    u_fixed: np.ndarray
    v_fixed: np.ndarray


@dataclass
class FrozenLowRank:
    u_fixed: np.ndarray
    v: np.ndarray


@dataclass
class BlockKron:
    shape: BkdShape
    blocks_u: np.ndarray  # (k, k, z, z)
    blocks_v: np.ndarray


@dataclass
class DecoupledBlockKron:
    shape: BkdShape
    blocks_u: np.ndarray
    blocks_v: np.ndarray
    blocks_u_fixed: np.ndarray
    blocks_v_fixed: np.ndarray


UpdateParam = (
    DenseUpdate
    | LowRankUpdate
    | DecoupledLowRank
    | FrozenLowRank
    | BlockKron
    | DecoupledBlockKron
)

_SCHEME_OF_TYPE = {
    DenseUpdate: "dense_update",
    LowRankUpdate: "lowrank",
    DecoupledLowRank: "lowrank_aad",
    FrozenLowRank: "frozen_lowrank",
    BlockKron: "bkd",
    DecoupledBlockKron: "bkd_aad",
}


def scheme_of(update: UpdateParam) -> str:
    return _SCHEME_OF_TYPE[type(update)]


def target_shape(update: UpdateParam) -> tuple[int, int]:
    """(m, n) dimensions of the delta this update materializes."""
    if isinstance(update, DenseUpdate):
        return update.delta.shape
    if isinstance(update, (LowRankUpdate, DecoupledLowRank)):
        return update.u.shape[0], update.v.shape[0]
    if isinstance(update, FrozenLowRank):
        return update.u_fixed.shape[0], update.v.shape[0]
    return update.shape.m, update.shape.n


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def init_update(
    scheme: str,
    shape,
    bound: float,
    rng: Rng,
    random_v: bool = False,
) -> UpdateParam:
    """Build a freshly initialized update.

    The random side (U, or the fixed pair for the decoupled kinds) is drawn
    uniform on [-bound, bound] from ``rng``; everything else starts at zero,
    so the materialized delta of a fresh update is exactly the zero matrix.
    ``rng`` must be seeded identically on every client of a round.

    ``random_v`` additionally randomizes the zero-started factor; it exists
    for the pre-decomposed-model start (both factors random) and is only
    meaningful for ``lowrank`` and ``bkd``.
    """
    if random_v and scheme not in ("lowrank", "bkd"):
        raise ValueError(f"random_v is not defined for scheme {scheme!r}")
    if scheme == "dense_update":
        m, n = shape
        return DenseUpdate(np.zeros((m, n)))
    if scheme == "lowrank":
        s: LowRankShape = shape
        u = linalg.fill_uniform(s.m, s.r, bound, rng)
        v = linalg.fill_uniform(s.n, s.r, bound, rng) if random_v else np.zeros((s.n, s.r))
        return LowRankUpdate(u, v)
    if scheme == "lowrank_aad":
        s = shape
        u_fixed = linalg.fill_uniform(s.m, s.r, bound, rng)
        v_fixed = linalg.fill_uniform(s.n, s.r, bound, rng)
        return DecoupledLowRank(
            np.zeros((s.m, s.r)), np.zeros((s.n, s.r)), u_fixed, v_fixed
        )
    if scheme == "frozen_lowrank":
        s = shape
        u_fixed = linalg.fill_uniform(s.m, s.r, bound, rng)
        return FrozenLowRank(u_fixed, np.zeros((s.n, s.r)))
    if scheme == "bkd":
        b: BkdShape = shape
        grid = (b.k, b.k, b.z, b.z)
        bu = linalg.fill_uniform(b.k * b.k, b.z * b.z, bound, rng).reshape(grid)
        bv = (
            linalg.fill_uniform(b.k * b.k, b.z * b.z, bound, rng).reshape(grid)
            if random_v
            else np.zeros(grid)
        )
        return BlockKron(b, bu, bv)
    if scheme == "bkd_aad":
        b = shape
        grid = (b.k, b.k, b.z, b.z)
        bu_fixed = linalg.fill_uniform(b.k * b.k, b.z * b.z, bound, rng).reshape(grid)
        bv_fixed = linalg.fill_uniform(b.k * b.k, b.z * b.z, bound, rng).reshape(grid)
        return DecoupledBlockKron(b, np.zeros(grid), np.zeros(grid), bu_fixed, bv_fixed)
    raise ValueError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# materialization and gradients
# ---------------------------------------------------------------------------


def _assemble(blocks_a: np.ndarray, blocks_b: np.ndarray) -> np.ndarray:
    """Lay out the k x k grid of per-block Kronecker products as one
    (k z^2, k z^2) matrix: entry [p z^2 + a z + b, q z^2 + c z + d]
    equals A[p,q,a,c] * B[p,q,b,d]."""
    k, _, z, _ = blocks_a.shape
    big = np.einsum("pqac,pqbd->pabqcd", blocks_a, blocks_b)
    side = k * z * z
    return big.reshape(side, side)


def _scatter(delta: np.ndarray, shape: BkdShape) -> np.ndarray:
    """Adjoint of the truncating reshape: place delta's entries into the
    leading m*n row-major slots of a zero assembled matrix, viewed as the
    6-D block tensor (p, a, b, q, c, d)."""
    side = shape.assembled_side
    flat = np.zeros(side * side)
    flat[: delta.size] = delta.ravel(order="C")
    return flat.reshape(shape.k, shape.z, shape.z, shape.k, shape.z, shape.z)


def materialize(update: UpdateParam) -> np.ndarray:
    """Recover the (m, n) delta this update represents."""
    if isinstance(update, DenseUpdate):
        return update.delta.copy()
    if isinstance(update, LowRankUpdate):
        return update.u @ update.v.T
    if isinstance(update, DecoupledLowRank):
        return update.u @ update.v_fixed.T + update.u_fixed @ update.v.T
    if isinstance(update, FrozenLowRank):
        return update.u_fixed @ update.v.T
    if isinstance(update, BlockKron):
        big = _assemble(update.blocks_u, update.blocks_v)
        return linalg.reshape_truncate(big, update.shape.m, update.shape.n)
    if isinstance(update, DecoupledBlockKron):
        big = _assemble(update.blocks_u, update.blocks_v_fixed) + _assemble(
            update.blocks_u_fixed, update.blocks_v
        )
        return linalg.reshape_truncate(big, update.shape.m, update.shape.n)
    raise TypeError(f"not an update: {update!r}")


def grad(update: UpdateParam, delta_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the trainable factors given the gradient w.r.t. the
    materialized delta.

    For W = U V^T the chain rule gives dU = dW V and dV = dW^T U; the
    decoupled kinds substitute their fixed partner.  For the Kronecker
    kinds the delta gradient is first scattered back into the assembled
    matrix (padding positions get exact zeros), then contracted per block.
    """
    if delta_grad.shape != target_shape(update):
        raise ValueError(
            f"gradient shape {delta_grad.shape} != target {target_shape(update)}"
        )
    if isinstance(update, DenseUpdate):
        return {"delta": delta_grad.copy()}
    if isinstance(update, LowRankUpdate):
        return {"u": delta_grad @ update.v, "v": delta_grad.T @ update.u}
    if isinstance(update, DecoupledLowRank):
        return {"u": delta_grad @ update.v_fixed, "v": delta_grad.T @ update.u_fixed}
    if isinstance(update, FrozenLowRank):
        return {"v": delta_grad.T @ update.u_fixed}
    if isinstance(update, BlockKron):
        dy = _scatter(delta_grad, update.shape)
        return {
            "blocks_u": np.einsum("pabqcd,pqbd->pqac", dy, update.blocks_v),
            "blocks_v": np.einsum("pabqcd,pqac->pqbd", dy, update.blocks_u),
        }
    if isinstance(update, DecoupledBlockKron):
        dy = _scatter(delta_grad, update.shape)
        return {
            "blocks_u": np.einsum("pabqcd,pqbd->pqac", dy, update.blocks_v_fixed),
            "blocks_v": np.einsum("pabqcd,pqac->pqbd", dy, update.blocks_u_fixed),
        }
    raise TypeError(f"not an update: {update!r}")


def trainable_arrays(update: UpdateParam) -> dict[str, np.ndarray]:
    """Live references to the trainable factors, keyed like grad()'s output."""
    if isinstance(update, DenseUpdate):
        return {"delta": update.delta}
    if isinstance(update, (LowRankUpdate, DecoupledLowRank)):
        return {"u": update.u, "v": update.v}
    if isinstance(update, FrozenLowRank):
        return {"v": update.v}
    return {"blocks_u": update.blocks_u, "blocks_v": update.blocks_v}


def fixed_arrays(update: UpdateParam) -> dict[str, np.ndarray]:
    if isinstance(update, DecoupledLowRank):
        return {"u_fixed": update.u_fixed, "v_fixed": update.v_fixed}
    if isinstance(update, FrozenLowRank):
        return {"u_fixed": update.u_fixed}
    if isinstance(update, DecoupledBlockKron):
        return {
            "blocks_u_fixed": update.blocks_u_fixed,
            "blocks_v_fixed": update.blocks_v_fixed,
        }
    return {}


def apply_grad(update: UpdateParam, grads: dict[str, np.ndarray], lr: float) -> None:
    """In-place SGD step on the trainable factors; fixed factors untouched."""
    for name, arr in trainable_arrays(update).items():
        arr -= lr * grads[name]


def fixed_checksum(update: UpdateParam) -> str:
    """Digest of the fixed factors, used to enforce that all clients hold
    bitwise-identical regenerated copies."""
    h = hashlib.sha256()
    for name in sorted(fixed_arrays(update)):
        h.update(name.encode())
        h.update(fixed_arrays(update)[name].tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# aggregation and accounting
# ---------------------------------------------------------------------------


def _signature(update: UpdateParam):
    arrays = trainable_arrays(update)
    dims = tuple((name, arrays[name].shape) for name in sorted(arrays))
    return (type(update), target_shape(update), dims)


def aggregate(
    updates: list[UpdateParam], weights: list[float] | None = None
) -> UpdateParam:
    """Average the trainable factors elementwise; carry fixed factors through.

    All updates must share kind, shape, and bitwise-identical fixed
    factors.  Summation follows list order, so callers wanting
    order-independent results must present a canonically ordered list.
    """
    if not updates:
        raise AggregationError("nothing to aggregate")
    sig = _signature(updates[0])
    for u in updates[1:]:
        if _signature(u) != sig:
            raise AggregationError(
                f"cannot aggregate {scheme_of(updates[0])}{target_shape(updates[0])} "
                f"with {scheme_of(u)}{target_shape(u)}"
            )
    checksums = {fixed_checksum(u) for u in updates}
    if len(checksums) > 1:
        raise ProtocolError("fixed factors differ across clients")
    if weights is not None:
        if len(weights) != len(updates):
            raise AggregationError("one weight per update required")
        total = float(sum(weights))
        if total <= 0:
            raise AggregationError("weights must sum to a positive value")

    def avg(name: str) -> np.ndarray:
        stack = np.stack([trainable_arrays(u)[name] for u in updates])
        if weights is None:
            return np.add.reduce(stack, axis=0) / len(updates)
        acc = np.zeros_like(stack[0])
        for w, x in zip(weights, stack):
            acc += w * x
        return acc / total

    first = updates[0]
    if isinstance(first, DenseUpdate):
        return DenseUpdate(avg("delta"))
    if isinstance(first, LowRankUpdate):
        return LowRankUpdate(avg("u"), avg("v"))
    if isinstance(first, DecoupledLowRank):
        return DecoupledLowRank(
            avg("u"), avg("v"), first.u_fixed.copy(), first.v_fixed.copy()
        )
    if isinstance(first, FrozenLowRank):
        return FrozenLowRank(first.u_fixed.copy(), avg("v"))
    if isinstance(first, BlockKron):
        return BlockKron(first.shape, avg("blocks_u"), avg("blocks_v"))
    return DecoupledBlockKron(
        first.shape,
        avg("blocks_u"),
        avg("blocks_v"),
        first.blocks_u_fixed.copy(),
        first.blocks_v_fixed.copy(),
    )


def param_count(update: UpdateParam) -> int:
    """Trainable scalars only; fixed factors are seed-reconstructible and
    never counted."""
    return sum(arr.size for arr in trainable_arrays(update).values())


def compression_ratio(update: UpdateParam) -> float:
    m, n = target_shape(update)
    return param_count(update) / (m * n)

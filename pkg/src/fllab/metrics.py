"""Evaluation, factor diagnostics, and CSV persistence of round reports.

The CSV schema is fixed:

    round,train_loss,test_loss,test_acc,uplink_bytes,downlink_bytes,merged,u_norm_max,v_norm_max,sigma_min_min

Floats are serialized with repr(), Python's shortest round-trip formatting,
so a re-parse recovers every value exactly.  Diagnostics are read-only:
no metrics call mutates training state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import decomp
from .model import Model, _cross_entropy

log = logging.getLogger(__name__)

CSV_HEADER = (
    "round,train_loss,test_loss,test_acc,uplink_bytes,downlink_bytes,"
    "merged,u_norm_max,v_norm_max,sigma_min_min"
)

SIGMA_DIAG_MAX_DIM = 64


def evaluate(model: Model, features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy on the given set."""
    if len(features) == 0:
        raise ValueError("empty evaluation set")
    logits, _ = model.forward(features)
    loss, _ = _cross_entropy(logits, labels)
    accuracy = float((logits.argmax(axis=1) == labels).mean())
    return loss, accuracy


def sigma_min_diag(m: np.ndarray) -> float:
    """Smallest singular value of a small matrix.

    Runs cyclic Jacobi rotations on the Gram matrix M^T M until the
    off-diagonal mass falls below 1e-12 of the Frobenius norm, then takes
    the square root of the smallest eigenvalue.  Only intended for
    diagnostic-scale inputs.
    """
    rows, cols = m.shape
    if rows > SIGMA_DIAG_MAX_DIM or cols > SIGMA_DIAG_MAX_DIM:
        raise ValueError(f"sigma_min_diag limited to {SIGMA_DIAG_MAX_DIM}x{SIGMA_DIAG_MAX_DIM}")
    g = m.T @ m
    n = g.shape[0]
    if n == 1:
        return math.sqrt(max(float(g[0, 0]), 0.0))
    scale = float(np.linalg.norm(g))
    if scale == 0.0:
        return 0.0
    for _ in range(60):  # each sweep reduces off-diagonal mass quadratically
        off = math.sqrt(max(float((g**2).sum() - (np.diag(g) ** 2).sum()), 0.0))
        if off <= 1e-12 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(g[p, q]) <= 1e-18 * scale:
                    continue
                tau = (g[q, q] - g[p, p]) / (2.0 * g[p, q])
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                rot = np.array([[c, s], [-s, c]])
                g[[p, q], :] = rot.T @ g[[p, q], :]
                g[:, [p, q]] = g[:, [p, q]] @ rot
    return math.sqrt(max(float(np.diag(g).min()), 0.0))


def factor_diagnostics(model: Model, with_sigma: bool = False):
    """(u_norm_max, v_norm_max, sigma_min_min) over the model's factored
    updates; NaN where no layer contributes.  sigma_min follows the
    paired-factor form sqrt(sigma_min(U)^2 + sigma_min(V)^2) and is skipped
    (with a notice) for factors above the diagnostic size cap."""
    u_norms, v_norms, sigmas = [], [], []

    def visit(u_mats, v_mats):
        u_norms.extend(float(np.linalg.norm(a)) for a in u_mats)
        v_norms.extend(float(np.linalg.norm(a)) for a in v_mats)
        if not with_sigma:
            return
        for a, b in zip(u_mats, v_mats):
            if max(a.shape + b.shape) > SIGMA_DIAG_MAX_DIM:
                log.info("sigma_min diagnostic skipped for %sx%s factor", *a.shape)
                continue
            sigmas.append(math.sqrt(sigma_min_diag(a) ** 2 + sigma_min_diag(b) ** 2))

    for layer in model.layers:
        up = layer.update
        if isinstance(up, (decomp.LowRankUpdate, decomp.DecoupledLowRank)):
            visit([up.u], [up.v])
        elif isinstance(up, decomp.FrozenLowRank):
            visit([up.u_fixed], [up.v])
        elif isinstance(up, (decomp.BlockKron, decomp.DecoupledBlockKron)):
            k = up.shape.k
            visit(
                [up.blocks_u[p, q] for p in range(k) for q in range(k)],
                [up.blocks_v[p, q] for p in range(k) for q in range(k)],
            )
    u_max = max(u_norms) if u_norms else float("nan")
    v_max = max(v_norms) if v_norms else float("nan")
    s_min = min(sigmas) if sigmas else float("nan")
    return u_max, v_max, s_min


# ---------------------------------------------------------------------------
# CSV sink
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


@dataclass
class MetricsSink:
    path: str
    _file: object = field(default=None, repr=False)
    rows_written: int = 0

    def __post_init__(self):
        self._file = open(self.path, "w", newline="")
        self._file.write(CSV_HEADER + "\n")
        self._file.flush()

    def write_round(self, report) -> None:
        fields = [
            report.round,
            report.train_loss,
            report.test_loss,
            report.test_acc,
            report.uplink_bytes,
            report.downlink_bytes,
            report.merged,
            report.u_norm_max,
            report.v_norm_max,
            report.sigma_min_min,
        ]
        self._file.write(",".join(_fmt(f) for f in fields) + "\n")
        self._file.flush()
        self.rows_written += 1

    def finalize(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.finalize()

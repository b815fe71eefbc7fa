"""Skip-connection gradient overlap probe.

At a residual block's addition node the backward signal reaching the block
input is the sum of two paths: the skip gradient and the branch gradient.
When the two align, the summed gradient's magnitude exceeds either part, so
updates overshoot relative to what each path alone would prescribe. The
probe splits the paths, logs their norms, the cosine between them, and the
amplification  |g_skip + g_branch| / max(|g_skip|, |g_branch|)  (2 at
perfect overlap, sqrt(2) at orthogonality).

Probing is observation-only: it re-runs path backwards into scratch buffers
and never touches parameter gradients or the training trajectory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import ShapeError, Tensor, l2_norm, reduce_stats

COSINE_NORM_FLOOR = 1e-12

OVERLAP_HEADER = ["step", "block", "skip_norm", "branch_norm", "total_norm",
                  "cosine", "amplification"]
GRADSTATS_HEADER = ["step", "phase", "path", "mean", "std", "l2norm"]


@dataclass(frozen=True)
class OverlapRecord:
    step: int
    block: str
    skip_norm: float
    branch_norm: float
    total_norm: float
    cosine: float
    amplification: float


def decompose(block: nn.ResidualBlock, entry: nn.BlockEntry, params,
              upstream: Tensor) -> tuple[Tensor, Tensor]:
    """Split dL/dy at the addition node into skip and branch input gradients.

    ``entry`` must be this block's cache entry from the forward pass that
    produced ``upstream``. Parameter gradients of the re-run go to a scratch
    sink; the projection weight's own gradient belongs to the skip path and
    is likewise discarded here.
    """
    if not isinstance(entry, nn.BlockEntry):
        raise nn.CacheMismatchError(f"cache entry is not a residual block entry: {entry!r}")
    if len(entry.branch_entries) != len(block.branch):
        raise nn.CacheMismatchError(
            f"cache for {entry.path!r} has {len(entry.branch_entries)} branch entries, "
            f"block has {len(block.branch)} layers"
        )
    if upstream.shape[1:] != tuple(_block_out_shape(block, entry)):
        raise nn.CacheMismatchError(
            f"upstream shape {upstream.shape} does not match block {entry.path!r}"
        )
    scratch: dict[str, Tensor] = {}
    return nn._block_backward_parts(block, entry, params, upstream, scratch)


def _block_out_shape(block: nn.ResidualBlock, entry: nn.BlockEntry):
    shape = tuple(entry.in_shape[1:])
    for name, sub in nn._named(block.branch, f"{entry.path}."):
        shape = nn._shape_after(sub, shape, name)
    return shape


def metrics(g_skip: Tensor, g_branch: Tensor, step: int, block: str) -> OverlapRecord:
    """Overlap statistics for one block at one step."""
    if g_skip.shape != g_branch.shape:
        raise ShapeError(f"overlap parts differ in shape: {g_skip.shape} vs {g_branch.shape}")
    ns = l2_norm(g_skip)
    nb = l2_norm(g_branch)
    nt = l2_norm(g_skip + g_branch)
    if ns < COSINE_NORM_FLOOR or nb < COSINE_NORM_FLOOR:
        cosine = 0.0
    else:
        dot = float(np.sum(g_skip.astype(np.float64) * g_branch.astype(np.float64)))
        cosine = dot / (ns * nb)
    peak = max(ns, nb)
    amplification = nt / peak if peak > 0 else 0.0
    return OverlapRecord(step, block, ns, nb, nt, cosine, amplification)


def layer_grad_stats(grads: dict[str, Tensor], step: int):
    """One (step, path, mean, std, l2norm) row per parameter tensor."""
    rows = []
    for path in grads:
        mean, std = reduce_stats(grads[path])
        rows.append((step, path, mean, std, l2_norm(grads[path])))
    return rows


def _fmt9(x: float) -> str:
    return f"{x:.9g}"


class OverlapLog:
    """Single-writer CSV sink for overlap records (9 significant digits)."""

    def __init__(self, path):
        self._f = open(path, "w", newline="")
        self._w = csv.writer(self._f)
        self._w.writerow(OVERLAP_HEADER)

    def append(self, rec: OverlapRecord) -> None:
        self._w.writerow([
            rec.step, rec.block, _fmt9(rec.skip_norm), _fmt9(rec.branch_norm),
            _fmt9(rec.total_norm), _fmt9(rec.cosine), _fmt9(rec.amplification),
        ])

    def close(self) -> None:
        self._f.close()


def read_overlap_csv(path) -> list[OverlapRecord]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != OVERLAP_HEADER:
            raise ValueError(f"unexpected overlap.csv header: {header}")
        return [
            OverlapRecord(int(r[0]), r[1], float(r[2]), float(r[3]), float(r[4]),
                          float(r[5]), float(r[6]))
            for r in reader
        ]


def summarize(records: list[OverlapRecord]) -> list[dict]:
    """Per-block means over all logged steps, ordered by block path."""
    by_block: dict[str, list[OverlapRecord]] = {}
    for rec in records:
        by_block.setdefault(rec.block, []).append(rec)
    out = []
    for block in sorted(by_block):
        rs = by_block[block]
        n = len(rs)
        out.append({
            "block": block,
            "records": n,
            "mean_cosine": sum(r.cosine for r in rs) / n,
            "mean_amplification": sum(r.amplification for r in rs) / n,
            "mean_skip_norm": sum(r.skip_norm for r in rs) / n,
            "mean_branch_norm": sum(r.branch_norm for r in rs) / n,
        })
    return out

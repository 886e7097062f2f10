"""Attention cost sweeps: MAC counts versus token count for RAM and joint global attention."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .errors import ConfigurationError
from .ram import (
    ATTENTION_TYPES,
    FlopLedger,
    RamProjections,
    SpatialEncodingPolicy,
    bound_det_attention,
    joint_global_attention,
    patch_patch_attention,
)
from .tensor import Parameter, Tensor

DEFAULT_TOKENS = (2 ** 10, 2 ** 12, 2 ** 14)
ROW_TYPES = ("patch_patch", "det_det", "det_patch")


@dataclass
class SweepPoint:
    mode: str          # ram | joint
    tokens: int        # PATCH tokens P
    det: int           # DET tokens D
    ledger: FlopLedger
    audited: int | None = None  # independent matmul-hook total, when requested

    @property
    def total(self) -> int:
        return self.ledger.total()


def grid_shape(p: int) -> tuple[int, int]:
    """Most nearly square h x w grid (h <= w) holding exactly ``p`` tokens."""
    if p < 1:
        raise ConfigurationError(f"token count must be positive, got {p}")
    h = next(d for d in range(math.isqrt(p), 0, -1) if p % d == 0)
    return h, p // h


def run_ram_layer(p: int, dim: int = 48, window: int = 7, det: int = 100, heads: int = 3, seed: int = 0,
                  ledger: FlopLedger | None = None) -> FlopLedger:
    """One reconfigured attention layer on a P-token map (see :func:`grid_shape`) with cross-attention on."""
    h, w = grid_shape(p)
    rng = np.random.default_rng(seed)
    ledger = ledger if ledger is not None else FlopLedger()
    dtype = np.float32
    proj = RamProjections(dim, heads, rng, dtype=dtype)
    table = Parameter(np.zeros(((2 * window - 1) ** 2, heads)), dtype=dtype)
    x = Tensor(rng.standard_normal((1, h, w, dim)).astype(dtype))
    det_tokens = Tensor(rng.standard_normal((1, det, dim)).astype(dtype))
    det_pos = Tensor(rng.standard_normal((det, dim)).astype(dtype))
    pos = Tensor(T.sine_encoding_2d(h, w, dim, dtype=dtype))
    with T.no_grad():
        qkv = proj.qkv(x)
        ledger.record("patch_patch", 1, "qkv", 3 * dim * dim * p)
        patch_patch_attention(x, proj, table, window, ledger=ledger, stage=1, qkv=qkv)
        bound_det_attention(det_tokens, det_pos, x, proj, pos, SpatialEncodingPolicy(), ledger=ledger, stage=1,
                            patch_qkv=qkv)
    return ledger


def run_joint_layer(p: int, dim: int = 48, det: int = 100, heads: int = 3, seed: int = 0,
                    ledger: FlopLedger | None = None, chunk: int = 512) -> FlopLedger:
    """The reference: one global self-attention layer over all P + D tokens."""
    rng = np.random.default_rng(seed)
    ledger = ledger if ledger is not None else FlopLedger()
    proj = RamProjections(dim, heads, rng, dtype=np.float32)
    tokens = Tensor(rng.standard_normal((1, p + det, dim)).astype(np.float32))
    with T.no_grad():
        joint_global_attention(tokens, proj, ledger=ledger, stage=1, chunk=chunk)
    return ledger


def sweep(tokens: Sequence[int] = DEFAULT_TOKENS, modes: Sequence[str] = ("ram", "joint"), dim: int = 48,
          window: int = 7, det: int = 100, heads: int = 3, audit: bool = False) -> list[SweepPoint]:
    """Run each mode at each PATCH-token count; optionally audit totals with the matmul hook."""
    points = []
    for mode in modes:
        if mode not in ("ram", "joint"):
            raise ConfigurationError(f"unknown sweep mode {mode!r}")
        for p in tokens:
            with T.count_matmul_macs() as counter:
                if mode == "ram":
                    ledger = run_ram_layer(p, dim, window, det, heads)
                else:
                    ledger = run_joint_layer(p, dim, det, heads)
            points.append(SweepPoint(mode, p, det, ledger, counter.total if audit else None))
    return points


def fit_exponent(points: Iterable[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares slope (and its standard error) of log(cost) against log(size)."""
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 3:
        raise ConfigurationError(f"need at least 3 points to fit an exponent, got {len(pts)}")
    if any(x <= 0 or y <= 0 for x, y in pts):
        raise ConfigurationError("sizes and costs must be positive")
    xs, ys = zip(*pts)
    fit = stats.linregress(np.log(xs), np.log(ys))
    return float(fit.slope), float(fit.stderr)


def slopes(points: Sequence[SweepPoint]) -> dict[str, tuple[float, float]]:
    out = {}
    for mode in sorted({pt.mode for pt in points}):
        out[mode] = fit_exponent([(pt.tokens, pt.total) for pt in points if pt.mode == mode])
    return out


def joint_row_split(point: SweepPoint, dim: int) -> dict[str, int]:
    """Attribute a joint-attention total to the three token-pair rows.

    Projections split by token count; score and value products split by the
    P*P, D*D and cross (2*P*D) pair counts.
    """
    p, d = point.tokens, point.det
    n = p + d
    k = point.ledger.kernel_counts()
    proj = sum(v for (kind, _, kern), v in k.items() if kind == "joint_global" and kern in ("qkv", "out"))
    pair = sum(v for (kind, _, kern), v in k.items() if kind == "joint_global" and kern in ("qk", "av"))
    return {
        "patch_patch": round(proj * p / n + pair * p * p / (n * n)),
        "det_det": round(proj * d / n + pair * d * d / (n * n)),
        "det_patch": round(pair * 2 * p * d / (n * n)),
    }


def ledger_rows(point: SweepPoint, dim: int) -> dict[str, int]:
    if point.mode == "joint":
        return joint_row_split(point, dim)
    return {kind: point.ledger.total(kind) for kind in ROW_TYPES}


def to_text(points: Sequence[SweepPoint], dim: int = 48, sep: str = "\t") -> str:
    """Delimited table: mode, P, D, per-row MACs, total."""
    lines = [sep.join(("mode", "patch_tokens", "det_tokens") + ROW_TYPES + ("total",))]
    for pt in points:
        rows = ledger_rows(pt, dim)
        lines.append(sep.join([pt.mode, str(pt.tokens), str(pt.det)] + [str(rows[r]) for r in ROW_TYPES]
                              + [str(pt.total)]))
    return "\n".join(lines) + "\n"


def render_table(points: Sequence[SweepPoint], dim: int = 48) -> str:
    """Human-readable comparison, one block per token count, plus fitted slopes."""
    labels = {"patch_patch": "PATCH x PATCH", "det_det": "DET x DET", "det_patch": "DET x PATCH"}
    out = []
    for p in sorted({pt.tokens for pt in points}):
        by_mode = {pt.mode: pt for pt in points if pt.tokens == p}
        out.append(f"P = {p}, D = {next(iter(by_mode.values())).det}")
        out.append(f"  {'attention':<16}{'joint (MACs)':>18}{'RAM (MACs)':>18}")
        rows = {m: ledger_rows(pt, dim) for m, pt in by_mode.items()}
        for r in ROW_TYPES:
            cells = [f"{rows[m][r]:>18,}" if m in rows else f"{'-':>18}" for m in ("joint", "ram")]
            out.append(f"  {labels[r]:<16}" + "".join(cells))
        cells = [f"{by_mode[m].total:>18,}" if m in by_mode else f"{'-':>18}" for m in ("joint", "ram")]
        out.append(f"  {'total':<16}" + "".join(cells))
    if all(sum(pt.mode == m for pt in points) >= 3 for m in {pt.mode for pt in points}):
        for mode, (slope, err) in slopes(points).items():
            out.append(f"slope[{mode}] = {slope:.3f} +/- {err:.3f}")
    return "\n".join(out) + "\n"


__all__ = ["SweepPoint", "sweep", "fit_exponent", "slopes", "render_table", "to_text", "run_ram_layer",
           "run_joint_layer", "joint_row_split", "grid_shape", "ATTENTION_TYPES"]

"""Count multiply-accumulates for one attention layer as the PATCH-token count grows.

The reconfigured layer (windowed PATCH attention plus bound DET attention)
should grow linearly in P, while a single global attention over all P + D
tokens grows quadratically. Run with ``python demos/complexity_sweep.py``.
"""
from vidt.profiler import render_table, slopes, sweep

TOKENS = [2**10, 2**11, 2**12, 2**13, 2**14]

if __name__ == "__main__":
    points = sweep(TOKENS, dim=48, window=7, det=100, audit=True)
    print(render_table(points, dim=48))
    print()
    for mode, (slope, err) in slopes(points).items():
        print(f"{mode:>5}: cost ~ P^{slope:.3f} (+/- {err:.3f})")
    mismatched = [pt for pt in points if pt.audited != pt.total]
    print("ledger agrees with the matmul hook" if not mismatched else f"{len(mismatched)} ledger mismatches")

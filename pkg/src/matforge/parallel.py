"""Thread-count policy and fixed-order tile mapping.

Work is always split into the same tiles regardless of how many threads run
them, and results are combined in tile order, so outputs are bit-identical for
any ``MATFORGE_THREADS`` value.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "MATFORGE_THREADS"
TILE_ROWS = 16


def thread_count() -> int:
    raw = os.environ.get(ENV_VAR, "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


def row_tiles(rows: int, tile_rows: int = TILE_ROWS) -> list[slice]:
    return [slice(r, min(r + tile_rows, rows)) for r in range(0, rows, tile_rows)]


def map_tiles(fn, tiles):
    """Apply ``fn`` to each tile; results come back in tile order."""
    tiles = list(tiles)
    n = min(thread_count(), len(tiles))
    if n <= 1:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, tiles))

"""Counter-based random streams.

Every random draw in the lab is addressed by ``(seed, path index, block, stream)``.
The key of a Philox generator carries the seed and the path index, the counter
carries the block number and the stream tag, so a path's increments never depend
on which worker produced them or on how many other paths were simulated.
"""

from __future__ import annotations

import numpy as np

__all__ = ["STREAMS", "block_generator", "normal_blocks", "poisson_blocks", "path_generator"]

STREAMS = {
    "brownian": 0,
    "poisson": 1,
    "coin": 2,
    "bootstrap": 3,
    "completion": 4,
}

_MASK64 = (1 << 64) - 1


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0 or seed > _MASK64:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    return seed


def block_generator(seed: int, path: int, block: int, stream: str = "brownian") -> np.random.Generator:
    """Generator for one ``(seed, path, block, stream)`` cell."""
    key = _check_seed(seed) | (int(path) << 64)
    counter = (int(block) << 128) | (STREAMS[stream] << 192)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def path_generator(seed: int, path: int, stream: str) -> np.random.Generator:
    """Single per-path generator (block 0) for streams that are not chunked in time."""
    return block_generator(seed, path, 0, stream)


def _fill(out, seed, path_ids, start, stop, block_size, stream, draw):
    first = start // block_size
    last = (stop - 1) // block_size
    for row, path in enumerate(path_ids):
        pos = 0
        for block in range(first, last + 1):
            lo = max(start, block * block_size) - block * block_size
            hi = min(stop, (block + 1) * block_size) - block * block_size
            gen = block_generator(seed, path, block, stream)
            if lo == 0 and hi == block_size:
                draw(gen, out[row, pos:pos + block_size])
            else:
                tmp = np.empty(block_size)
                draw(gen, tmp)
                out[row, pos:pos + hi - lo] = tmp[lo:hi]
            pos += hi - lo
    return out


def normal_blocks(seed: int, path_ids, start: int, stop: int, block_size: int,
                  stream: str = "brownian") -> np.ndarray:
    """Standard normals for steps ``[start, stop)`` of every path in ``path_ids``.

    Step ``k`` of path ``p`` always receives the same draw, whatever ``start``
    and ``stop`` are, as long as ``block_size`` is unchanged.
    """
    path_ids = np.asarray(path_ids, dtype=np.int64)
    out = np.empty((path_ids.size, max(stop - start, 0)))
    if stop <= start:
        return out

    def draw(gen, buf):
        gen.standard_normal(out=buf)

    return _fill(out, seed, path_ids, start, stop, block_size, stream, draw)


def poisson_blocks(seed: int, path_ids, start: int, stop: int, block_size: int,
                   mean: float, stream: str = "poisson") -> np.ndarray:
    """Poisson(mean) counts per step, addressed like :func:`normal_blocks`."""
    path_ids = np.asarray(path_ids, dtype=np.int64)
    out = np.zeros((path_ids.size, max(stop - start, 0)))
    if stop <= start or mean == 0.0:
        return out

    def draw(gen, buf):
        buf[:] = gen.poisson(mean, size=buf.size)

    return _fill(out, seed, path_ids, start, stop, block_size, stream, draw)

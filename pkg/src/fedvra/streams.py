"""Deterministic random streams keyed by (master seed, round, slot).

Every client draws its mini-batches from a private stream derived from
``(master, round, client_id)`` and the server draws its client sample from
``(master, round, N + 1)``.  Keys are mixed by :class:`numpy.random.SeedSequence`
(a hash of the full 64-bit entropy words), so the streams do not depend on the
order in which clients are processed.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(master: int, round_index: int, slot: int) -> np.random.Generator:
    key = [int(master) & _MASK64, int(round_index) & _MASK64, int(slot) & _MASK64]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def client_stream(master: int, round_index: int, client_id: int) -> np.random.Generator:
    return stream(master, round_index, client_id)


def server_stream(master: int, round_index: int, num_clients: int) -> np.random.Generator:
    return stream(master, round_index, num_clients + 1)

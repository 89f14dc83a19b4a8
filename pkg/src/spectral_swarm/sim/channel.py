"""Range-limited lossy broadcast channel.

Links are directed: the message from i reaches j when their distance is at most
``sigma + jitter[i, j]``. A link then succeeds independently with
``msg_success_prob`` and each receiver keeps at most ``budget`` of the messages
that arrived (uniform subset without replacement).
"""
from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.spatial.distance import pdist, squareform


class Channel:
    def __init__(self, pos, sigma: float, rng: np.random.Generator, success_prob: float = 1.0,
                 budget: int | None = None, jitter: float = 0.0):
        self.n = len(pos)
        self.p = float(success_prob)
        self.budget = budget
        d = squareform(pdist(np.asarray(pos, dtype=float))) if self.n > 1 else np.zeros((self.n, self.n))
        reach = np.full((self.n, self.n), float(sigma))
        if jitter > 0:
            reach = reach + rng.normal(0.0, jitter, (self.n, self.n))
        # in_range[j, i]: j hears i; reach[i, j] is the i -> j range
        in_range = (d <= reach).T
        np.fill_diagonal(in_range, False)
        self.in_range = in_range
        self.rx, self.tx = np.nonzero(in_range)
        self.lossless = self.p >= 1.0 and (budget is None or budget >= self.n)

    @property
    def n_links(self) -> int:
        return len(self.rx)

    def delivery_prob(self, repeats: int = 1) -> float:
        """Probability that at least one of ``repeats`` copies of a message gets through a link."""
        return 1.0 - (1.0 - self.p) ** max(int(repeats), 1)

    def sample_links(self, rng: np.random.Generator, repeats: int = 1) -> np.ndarray:
        """Boolean mask over the in-range links delivered in one round.

        ``repeats`` is how many times each sender re-broadcasts the same value
        within the round; the receiver only needs one copy.
        """
        m = self.n_links
        if self.lossless:
            return np.ones(m, dtype=bool)
        q = self.delivery_prob(repeats)
        keep = rng.random(m) < q if q < 1.0 else np.ones(m, dtype=bool)
        if self.budget is not None:
            keys = np.where(keep, rng.random(m), np.inf)
            # rank the delivered messages of each receiver in a random order
            order = np.lexsort((keys, self.rx))
            rx_sorted = self.rx[order]
            start = np.searchsorted(rx_sorted, rx_sorted, side="left")
            rank = np.empty(m, dtype=np.int64)
            rank[order] = np.arange(m) - start
            keep &= rank < self.budget
        return keep

    def matrix(self, mask=None, restrict=None) -> sparse.csr_matrix:
        """Delivery matrix ``recv[j, i]`` for the links in ``mask``, optionally ANDed with ``restrict``."""
        rx, tx = self.rx, self.tx
        if mask is not None:
            rx, tx = rx[mask], tx[mask]
        if restrict is not None:
            ok = restrict[rx, tx]
            rx, tx = rx[ok], tx[ok]
        data = np.ones(len(rx), dtype=np.float32)
        return sparse.csr_matrix((data, (rx, tx)), shape=(self.n, self.n))

    def dense(self, mask=None) -> np.ndarray:
        out = np.zeros((self.n, self.n), dtype=bool)
        rx, tx = (self.rx, self.tx) if mask is None else (self.rx[mask], self.tx[mask])
        out[rx, tx] = True
        return out


def broadcast_round(positions, sigma: float, rng: np.random.Generator, success_prob: float = 1.0,
                    budget: int | None = None, jitter: float = 0.0) -> list[list[int]]:
    """Inbox of every agent for one broadcast by all agents: senders in random order."""
    ch = Channel(positions, sigma, rng, success_prob, budget, jitter)
    keep = ch.sample_links(rng)
    inbox = [[] for _ in range(ch.n)]
    idx = np.flatnonzero(keep)
    for k in idx[rng.permutation(len(idx))]:
        inbox[ch.rx[k]].append(int(ch.tx[k]))
    return inbox

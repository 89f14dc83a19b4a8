"""Per-agent protocol: handshake, diffusion, lambda_2 fit, consensus, classification.

Every transition exists in two forms: a per-agent function operating on one
agent's state and inbox, and a swarm-level kernel over arrays (``swarm_*`` /
``fit_*``) that the simulation engine runs. Both compute the same arithmetic.
"""
from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .geometry import ShapeKind

MAX_PAYLOAD_BITS = 72
UID_BITS = 16
LOG_FLOOR = 1e-12
GROWTH_LIMIT = 10.0
MIN_FIT_WINDOW = 0.75


class Stage(enum.IntEnum):
    SEEDING = 0
    SHORT_WALK = 1
    HANDSHAKE = 2
    PRE_DIFFUSION = 3
    DIFFUSION = 4
    CONSENSUS = 5
    DONE = 6


class FitStatus(enum.IntEnum):
    OK = 0
    DEGENERATE = 1  # zero initial state: isolated agent or all-equal start
    NO_SAMPLES = 2  # fewer than 2 samples above the log floor in the window
    NON_FINITE = 3
    NO_DECAY = 4  # fitted slope is not negative (value kept)
    GROWTH = 5  # |s| grew past GROWTH_LIMIT times its initial magnitude


# a non-negative slope is a legitimate (if poor) estimate and is kept in the averages
DIVERGENT_STATUSES = (FitStatus.NO_SAMPLES, FitStatus.NON_FINITE, FitStatus.GROWTH)


class PayloadTooLarge(ValueError):
    pass


def quantize_half(values) -> np.ndarray:
    """Round-trip through IEEE half precision, as done on the wire."""
    with np.errstate(over="ignore", invalid="ignore"):
        return np.asarray(values, dtype=np.float64).astype(np.float16).astype(np.float64)


class MessageKind(enum.Enum):
    HANDSHAKE = "handshake"
    DIFFUSION = "diffusion"
    CONSENSUS = "consensus"


@dataclass(frozen=True)
class Message:
    sender: int
    kind: MessageKind
    payload: tuple

    def __post_init__(self):
        if not 0 <= self.sender < 2 ** UID_BITS:
            raise ValueError(f"sender id {self.sender} outside the 16-bit range")
        if self.payload_bits > MAX_PAYLOAD_BITS:
            raise PayloadTooLarge(f"{self.kind.value} payload is {self.payload_bits} bits > {MAX_PAYLOAD_BITS}")

    @property
    def payload_bits(self) -> int:
        per_item = {MessageKind.HANDSHAKE: 16, MessageKind.DIFFUSION: 16, MessageKind.CONSENSUS: 32}[self.kind]
        return UID_BITS + per_item * len(self.payload)

    @classmethod
    def handshake(cls, sender: int, known_ids) -> "Message":
        known_ids = tuple(int(k) for k in known_ids)
        if len(known_ids) > 3:
            raise PayloadTooLarge("a handshake message carries at most 3 known ids")
        return cls(sender, MessageKind.HANDSHAKE, known_ids)

    @classmethod
    def diffusion(cls, sender: int, values) -> "Message":
        return cls(sender, MessageKind.DIFFUSION, tuple(float(v) for v in quantize_half(np.ravel(values))))

    @classmethod
    def consensus(cls, sender: int, value: float) -> "Message":
        return cls(sender, MessageKind.CONSENSUS, (float(np.float32(value)),))


@dataclass(frozen=True)
class ProtocolParams:
    """Diffusion rate ``c`` (1/s), step ``tau`` (s) and the step/round/session counts."""

    c: float = 1.0
    tau: float = 1.0 / 15.0
    T: int = 450
    B: int = 162
    C: int = 20
    P: int = 3
    I: int = 30
    mse_guard: bool = True
    fit_min_window: float = MIN_FIT_WINDOW

    def __post_init__(self):
        if not 0.0 <= self.fit_min_window <= 1.0:
            raise ValueError("fit_min_window must be in [0, 1]")
        if not self.c * self.tau > 0:
            raise ValueError("c * tau must be positive")
        for name in ("T", "C", "P", "I"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.B < self.T:
            raise ValueError("burn-in B must satisfy 0 <= B < T")
        if UID_BITS + 16 * self.P > MAX_PAYLOAD_BITS:
            raise PayloadTooLarge(f"P={self.P} half-precision values do not fit in a {MAX_PAYLOAD_BITS}-bit payload")

    @property
    def ctau(self) -> float:
        return self.c * self.tau

    def stability_warning(self, max_degree: int) -> str | None:
        """Explicit-Euler advisory: c*tau*(max degree) should stay below 2."""
        if self.ctau * max_degree >= 2:
            msg = f"c*tau*max_degree = {self.ctau * max_degree:.3g} >= 2: diffusion may be unstable"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            return msg
        return None


@dataclass
class AgentState:
    id: int
    position: tuple[float, float]
    P: int = 3
    stage: Stage = Stage.SEEDING
    stable_neighbors: set = field(default_factory=set)
    s: np.ndarray = None
    s0: np.ndarray = None
    decay_log: list = None
    indiv_lambda2: list = None
    consensus_lambda2: float = math.nan
    final_lambda2_history: list = field(default_factory=list)
    led: str = "off"
    diverged: bool = False

    def __post_init__(self):
        if self.s is None:
            self.s = np.zeros(self.P)
        if self.s0 is None:
            self.s0 = np.zeros(self.P)
        if self.decay_log is None:
            self.decay_log = [[] for _ in range(self.P)]
        if self.indiv_lambda2 is None:
            self.indiv_lambda2 = [math.nan] * self.P

    def advance(self, stage: Stage):
        if stage is Stage.SHORT_WALK and self.stage in (Stage.SEEDING, Stage.CONSENSUS):
            pass
        elif stage is Stage.HANDSHAKE and self.stage in (Stage.SEEDING, Stage.SHORT_WALK, Stage.CONSENSUS):
            pass
        elif stage is Stage.DONE and self.stage is Stage.CONSENSUS:
            pass
        elif stage != self.stage + 1:
            raise ValueError(f"illegal stage transition {self.stage.name} -> {stage.name}")
        self.stage = stage

    def start_session(self, s0) -> None:
        self.s0 = np.asarray(s0, dtype=np.float64).copy()
        self.s = self.s0.copy()
        self.decay_log = [[] for _ in range(self.P)]
        self._log(0.0)

    def _log(self, t: float):
        for d in range(self.P):
            self.decay_log[d].append((t, float(abs(self.s[d]))))


# --- handshake -----------------------------------------------------------------

def handshake(n: int, rounds: int, slots: int, deliver, rng: np.random.Generator,
              max_neighbors: int | None = 20, quorum: float = 1.0) -> np.ndarray:
    """Identify stable neighbors over ``rounds`` handshake rounds.

    ``deliver(r, k)`` returns a boolean matrix ``recv`` where ``recv[j, i]`` means
    agent j received agent i's message in slot k of round r. Each round, every
    agent starts with an empty known list, adds the senders it hears (up to
    ``max_neighbors``) and broadcasts 3 known ids per message, round-robin.
    Agent j confirms i in a round when it hears a message from i that lists j.

    Returns ``stable`` with ``stable[j, i]`` true when j confirmed i in at least
    ``quorum`` of the rounds (every round by default).
    """
    cap = n if max_neighbors is None else int(max_neighbors)
    confirmed_rounds = np.zeros((n, n), dtype=np.int32)
    for r in range(rounds):
        known = np.zeros((n, n), dtype=bool)
        rank = np.full((n, n), -1, dtype=np.int64)
        length = np.zeros(n, dtype=np.int64)
        ptr = np.zeros(n, dtype=np.int64)
        confirmed = np.zeros((n, n), dtype=bool)
        for k in range(slots):
            period = np.maximum(length, 1)[:, None]
            payload = known & (((rank - ptr[:, None]) % period) < 3)
            ptr = np.where(length > 0, (ptr + 3) % np.maximum(length, 1), 0)
            recv = np.asarray(deliver(r, k), dtype=bool)
            confirmed |= recv & payload.T
            new = recv & ~known
            if new.any():
                keys = np.where(new, rng.random((n, n)), np.inf)
                order = keys.argsort(axis=1, kind="stable").argsort(axis=1, kind="stable")
                accept = new & (order < (cap - length)[:, None])
                rank = np.where(accept, length[:, None] + order, rank)
                known |= accept
                length += accept.sum(axis=1)
        confirmed_rounds += confirmed
    return confirmed_rounds >= math.ceil(quorum * rounds - 1e-9)


# --- diffusion ----------------------------------------------------------------

def diffusion_step(agent: AgentState, received, ctau: float) -> np.ndarray:
    """Update one agent's P states from ``received`` = [(sender, values), ...].

    Only stable neighbors count and a repeated sender keeps its last message.
    Differences are taken against the agent's own value as it went on the wire,
    which keeps the update antisymmetric across every link.
    """
    latest = {}
    for sender, values in received:
        if sender in agent.stable_neighbors:
            latest[sender] = np.asarray(values, dtype=np.float64)
    own = quantize_half(agent.s)
    acc = np.zeros_like(agent.s, dtype=np.float64)
    for values in latest.values():
        acc += values - own
    with np.errstate(over="ignore", invalid="ignore"):
        agent.s = agent.s + ctau * acc
    if not np.all(np.isfinite(agent.s)):
        agent.diverged = True
    return agent.s


def swarm_diffusion_step(s: np.ndarray, recv, ctau: float, count=None) -> np.ndarray:
    """Synchronous update of all agents: ``s`` is (N, P), ``recv[j, i]`` as in handshake.

    ``count`` (N, 1) may be passed when the in-degree of ``recv`` is already known.
    """
    wire = quantize_half(s)
    if count is None:
        count = np.asarray(recv.sum(axis=1), dtype=np.float64).reshape(-1, 1)
    with np.errstate(over="ignore", invalid="ignore"):
        incoming = np.asarray(recv @ wire, dtype=np.float64)
        return s + ctau * (incoming - count * wire)


@numba.njit(cache=True)
def _half_round(x):
    # scalar equivalent of quantize_half: round to 11 significant bits, ties to even
    if not (x == x) or x == 0.0:
        return x
    ax = abs(x)
    if ax >= 65520.0:
        return math.copysign(math.inf, x)
    _, e = math.frexp(ax)
    q = math.ldexp(1.0, max(e - 11, -24))
    r = ax / q
    f = math.floor(r)
    d = r - f
    if d > 0.5 or (d == 0.5 and f % 2 == 1):
        f += 1.0
    return math.copysign(f * q, x)


@numba.njit(cache=True)
def _fixed_graph_session(s, indptr, indices, T, ctau, log):
    n, P = s.shape
    wire = np.empty((n, P))
    total = np.zeros(P)
    for i in range(n):
        for p in range(P):
            total[p] += s[i, p]
    drift = 0.0
    for g in range(T):
        for i in range(n):
            for p in range(P):
                wire[i, p] = _half_round(s[i, p])
        for i in range(n):
            cnt = float(indptr[i + 1] - indptr[i])
            for p in range(P):
                acc = 0.0
                for k in range(indptr[i], indptr[i + 1]):
                    acc += wire[indices[k], p]
                s[i, p] = s[i, p] + ctau * (acc - cnt * wire[i, p])
        for p in range(P):
            new_total = 0.0
            for i in range(n):
                new_total += s[i, p]
                log[g + 1, i, p] = s[i, p]
            d = abs(new_total - total[p])
            if not (d == d) or d == math.inf:
                drift = math.inf
            elif d > drift:
                drift = d
            total[p] = new_total
    return drift


def fixed_graph_session(s0, recv, T: int, ctau: float):
    """T synchronous steps on a fixed delivery matrix (compiled path of swarm_diffusion_step).

    Returns (final states, state log of shape (T+1, N, P), max per-step drift of the state sum).
    """
    recv = recv.tocsr()
    recv.sort_indices()
    s = np.array(s0, dtype=np.float64)
    log = np.empty((T + 1,) + s.shape)
    log[0] = s
    drift = _fixed_graph_session(s, recv.indptr.astype(np.int64), recv.indices.astype(np.int64), int(T),
                                 float(ctau), log)
    return s, log, float(drift)


def pre_diffusion_recenter(s0_pre, sT_pre) -> np.ndarray:
    """Zero-mean start: initial minus converged pre-diffusion state."""
    return np.asarray(s0_pre, dtype=np.float64) - np.asarray(sT_pre, dtype=np.float64)


# --- lambda_2 estimation --------------------------------------------------------

@dataclass(frozen=True)
class Fit:
    lambda2: float
    mse: float
    end_step: int
    status: FitStatus

    @property
    def ok(self) -> bool:
        return self.status is FitStatus.OK


def fit_decay(abs_s: np.ndarray, tau: float, B: int, c: float = 1.0, guard: bool = True,
              min_window: float = MIN_FIT_WINDOW):
    """Vectorized decay-rate fit.

    ``abs_s`` is (T+1, M): |s^n| for steps n = 0..T of M independent traces.
    OLS of log|s^n| against t = n*tau over steps B..k; with ``guard`` the prefix
    end k in [B+2, T] minimizing the regression MSE (SSE / (m - 2)) is kept,
    ties going to the longest prefix. Candidate prefixes must span at least
    ``min_window`` of the steps B..T, so the guard trims a degenerating tail
    rather than fitting the first few samples. Samples below the log floor are
    dropped.
    Returns (lambda2, mse, end_step, status), each of shape (M,); lambda2 is the
    negated slope divided by ``c``.
    """
    a = np.asarray(abs_s, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    T = a.shape[0] - 1
    M = a.shape[1]
    status = np.full(M, FitStatus.OK, dtype=np.int8)
    lam = np.full(M, np.nan)
    mse_out = np.full(M, np.nan)
    end = np.full(M, -1, dtype=np.int64)

    finite = np.all(np.isfinite(a), axis=0)
    start = a[0]
    peak = np.where(np.isfinite(a), a, 0.0).max(axis=0)
    with np.errstate(invalid="ignore"):
        grew = peak > GROWTH_LIMIT * np.maximum(start, LOG_FLOOR)
    status[start < LOG_FLOOR] = FitStatus.DEGENERATE

    w = a[B:] >= LOG_FLOOR
    w &= np.isfinite(a[B:])
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(w, np.log(np.where(w, a[B:], 1.0)), 0.0)
    t = (np.arange(B, T + 1) - B)[:, None] * tau * np.ones((1, M))
    y0 = np.where(w.any(axis=0), y[np.argmax(w, axis=0), np.arange(M)], 0.0)
    y = np.where(w, y - y0, 0.0)
    t = np.where(w, t, 0.0)
    sw = np.cumsum(w, axis=0)
    st = np.cumsum(t, axis=0)
    sy = np.cumsum(y, axis=0)
    stt = np.cumsum(t * t, axis=0)
    sty = np.cumsum(t * y, axis=0)
    syy = np.cumsum(y * y, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ctt = stt - st * st / sw
        cty = sty - st * sy / sw
        cyy = syy - sy * sy / sw
        slope = cty / ctt
        sse = np.maximum(cyy - cty * cty / ctt, 0.0)
        mse = sse / (sw - 2)
    usable = sw >= 3
    shortest = max(2, math.ceil(min_window * (T - B + 1)) - 1)
    usable[:min(shortest, T - B)] = False
    if guard:
        cand = np.where(usable & np.isfinite(slope), mse, np.inf)
        best = np.nanmin(cand, axis=0)
        tie = cand <= best[None, :] + 1e-12
        # longest prefix among the (near) minima
        k_idx = np.where(tie.any(axis=0), (T - B) - np.argmax(tie[::-1], axis=0), -1)
        has3 = np.isfinite(best)
    else:
        k_idx = np.full(M, T - B)
        has3 = sw[-1] >= 3
    two_only = ~has3 & (sw[-1] == 2)
    k_idx = np.where(two_only, T - B, k_idx)
    fitted = has3 | two_only
    cols = np.arange(M)
    kk = np.clip(k_idx, 0, T - B)
    sl = slope[kk, cols]
    lam = np.where(fitted, -sl / c, np.nan)
    mse_out = np.where(has3, mse[kk, cols], np.where(two_only, 0.0, np.nan))
    end = np.where(fitted, kk + B, -1)

    ok = status == FitStatus.OK
    status[ok & ~fitted] = FitStatus.NO_SAMPLES
    status[ok & fitted & ~(lam > 0)] = FitStatus.NO_DECAY
    status[(status != FitStatus.DEGENERATE) & grew] = FitStatus.GROWTH
    status[~finite] = FitStatus.NON_FINITE
    lam = np.where((status == FitStatus.OK) | (status == FitStatus.NO_DECAY), lam, np.nan)
    return lam, mse_out, end, status


def estimate_indiv_lambda2(decay_log, B: int, tau: float, c: float = 1.0, guard: bool = True,
                           min_window: float = MIN_FIT_WINDOW) -> Fit:
    """Fit one session's ``decay_log`` = [(t, |s|), ...] for steps 0..T."""
    abs_s = np.array([v for _, v in decay_log], dtype=np.float64)
    lam, mse, end, status = fit_decay(abs_s[:, None], tau, B, c, guard, min_window)
    return Fit(float(lam[0]), float(mse[0]), int(end[0]), FitStatus(int(status[0])))


def session_average(values) -> float:
    """Mean of the successful sessions; NaN when every session failed."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    return float(v.mean()) if len(v) else math.nan


# --- consensus -------------------------------------------------------------------

def consensus_round(own: float, received) -> float:
    """(sum(received) + own) / (len(received) + 1); a missing own value is skipped."""
    vals = [float(x) for x in received if math.isfinite(float(x))]
    if not math.isfinite(own):
        return sum(vals) / len(vals) if vals else math.nan
    return (sum(vals) + own) / (len(vals) + 1)


def swarm_consensus_round(values: np.ndarray, recv) -> np.ndarray:
    """Vectorized consensus round over ``values`` (N,) using delivery matrix ``recv``.

    Agents without a value do not broadcast and adopt the mean of what they receive.
    Received values are single precision, as on the wire.
    """
    v = np.asarray(values, dtype=np.float64)
    has = np.isfinite(v)
    vz = np.where(has, v, 0.0)
    wire = vz.astype(np.float32).astype(np.float64)
    r = recv.multiply(has[None, :]) if hasattr(recv, "multiply") else recv & has[None, :]
    total = np.asarray(r @ wire).ravel()
    count = np.asarray(r.sum(axis=1)).ravel()
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(has, (total + vz) / (count + 1), total / count)
    return np.where(has | (count > 0), out, np.nan)


def final_lambda2(history) -> float:
    """Mean of the per-iteration consensus values (NaN entries skipped)."""
    return session_average(history)


# --- classification ----------------------------------------------------------------

UNCLASSIFIED = "Unclassified"


@dataclass
class CentroidTable:
    entries: dict

    def __post_init__(self):
        self.entries = {ShapeKind.parse(k): float(v) for k, v in self.entries.items()}
        bad = [k.value for k, v in self.entries.items() if not math.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite centroid for {bad}")

    def to_json(self) -> str:
        return json.dumps({k.value: v for k, v in self.entries.items()}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CentroidTable":
        return cls(json.loads(text))

    def __len__(self):
        return len(self.entries)


def classify(final: float, table: CentroidTable) -> ShapeKind | str:
    """Nearest centroid; exact-distance ties go to the lower centroid."""
    if not table.entries:
        raise ValueError("empty centroid table")
    if not math.isfinite(final):
        return UNCLASSIFIED
    best, best_d, best_c = None, math.inf, math.inf
    for kind, centroid in sorted(table.entries.items(), key=lambda kv: kv[1]):
        d = abs(final - centroid)
        if math.isclose(d, best_d, rel_tol=1e-9, abs_tol=1e-12):
            if centroid < best_c:
                best, best_d, best_c = kind, d, centroid
        elif d < best_d:
            best, best_d, best_c = kind, d, centroid
    return best


def classify_many(finals: np.ndarray, table: CentroidTable) -> list:
    return [classify(float(f), table) for f in finals]


def trace_record(**fields) -> str:
    return json.dumps(fields, sort_keys=True)


def params_dict(p: ProtocolParams) -> dict:
    return asdict(p)

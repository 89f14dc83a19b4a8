"""Discrete-time swarm engine.

Logical time only: stages are scheduled in kiloticks and each diffusion or
consensus step is one synchronous broadcast round.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .. import protocol as proto
from ..geometry import equidistant_placement, packed_placement, sample_uniform
from ..spectral import CommGraph, build_graph, connected_components, spectrum
from .channel import Channel
from .config import Placement, SimConfig
from .led import led_color
from .motion import MotionParams, MotionState, advance


@dataclass
class IterationRecord:
    mean_degree: float
    components: int
    stable_mean_degree: float
    stable_components: int
    stable_symmetric: bool
    oracle_lambda2: float  # exact lambda_2 of the stable graph (symmetrized), NaN if N < 2
    oracle_lambda_max: float
    max_sum_drift: float  # max over steps and sessions of |sum_i s^{n+1} - sum_i s^n|
    divergent_fits: int
    degenerate_fits: int
    swarm_mean_indiv: float

    def to_dict(self):
        return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in self.__dict__.items()}


@dataclass
class RunResult:
    shape: str
    seed: int
    config: dict
    final_lambda2: np.ndarray  # (N,)
    indiv_history: np.ndarray  # (I, N)
    consensus_history: np.ndarray  # (I, N)
    fit_status: np.ndarray  # (I, N, P)
    iterations: list
    positions: np.ndarray  # final positions (N, 2)
    classifications: list | None = None
    predicted: str | None = None
    leds: list | None = None
    divergence_threshold: float = 0.5
    traces: list = field(default_factory=list, repr=False)

    @property
    def n_fits(self) -> int:
        return int(self.fit_status.size)

    @property
    def divergence_fraction(self) -> float:
        div = np.isin(self.fit_status, [int(s) for s in proto.DIVERGENT_STATUSES])
        return float(div.mean()) if div.size else 0.0

    @property
    def divergence_flags(self) -> int:
        return int(np.isin(self.fit_status, [int(s) for s in proto.DIVERGENT_STATUSES]).sum())

    @property
    def diverged(self) -> bool:
        return self.divergence_fraction > self.divergence_threshold

    @property
    def run_value(self) -> float:
        """Swarm-level Final lambda_2: median over agents with a finite value."""
        f = self.final_lambda2[np.isfinite(self.final_lambda2)]
        return float(np.median(f)) if len(f) else float("nan")

    def final_after(self, x: int) -> np.ndarray:
        """Per-agent Final lambda_2 using only the first ``x`` iterations."""
        h = self.consensus_history[:x]
        with np.errstate(invalid="ignore"):
            ok = np.isfinite(h)
            cnt = ok.sum(axis=0)
            return np.where(cnt > 0, np.where(ok, h, 0.0).sum(axis=0) / np.maximum(cnt, 1), np.nan)

    def run_value_after(self, x: int) -> float:
        f = self.final_after(x)
        f = f[np.isfinite(f)]
        return float(np.median(f)) if len(f) else float("nan")

    def classify(self, table: proto.CentroidTable) -> str:
        self.classifications = [c.value if hasattr(c, "value") else c
                                for c in proto.classify_many(self.final_lambda2, table)]
        self.predicted = majority_vote(self.classifications)
        self.leds = [led_color(proto.Stage.DONE, shape=c) for c in self.classifications]
        return self.predicted

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(x) else float(x) for x in np.ravel(a)]

        return {
            "shape": self.shape,
            "seed": self.seed,
            "predicted": self.predicted,
            "run_value": None if not np.isfinite(self.run_value) else self.run_value,
            "divergence_fraction": self.divergence_fraction,
            "diverged": self.diverged,
            "final_lambda2": clean(self.final_lambda2),
            "classifications": self.classifications,
            "leds": self.leds,
            "consensus_history": [clean(r) for r in self.consensus_history],
            "indiv_history": [clean(r) for r in self.indiv_history],
            "iterations": [it.to_dict() for it in self.iterations],
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def majority_vote(labels) -> str:
    votes = Counter(lab for lab in labels if lab not in (None, proto.UNCLASSIFIED))
    if not votes:
        return proto.UNCLASSIFIED
    top = votes.most_common()
    if len(top) > 1 and top[0][1] == top[1][1]:
        return proto.UNCLASSIFIED
    return top[0][0]


def initial_positions(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    arena = cfg.arena
    mode = Placement(cfg.placement)
    if mode is Placement.DISPERSION:
        return packed_placement(arena, cfg.n_agents, cfg.agent_radius)
    if mode is Placement.RANDOM:
        return sample_uniform(arena, cfg.n_agents, rng)
    return equidistant_placement(arena, cfg.n_agents, rng)


def auto_slots(channel: Channel, max_neighbors: int | None, confidence: float = 0.99) -> int:
    """Slots per handshake round so that every known id is advertised with high probability.

    One slot fills the known list, then ceil(k/3) slots cycle k ids once; under
    loss the cycle is repeated until a given id gets through with ``confidence``.
    """
    k = int(channel.in_range.sum(axis=1).max(initial=0))
    if max_neighbors is not None:
        k = min(k, max_neighbors)
    cycle = max(1, math.ceil(k / 3))
    p = channel.p
    if p <= 0:
        return 1
    repeats = 1 if p >= 1 else math.ceil(math.log(1 - confidence) / math.log(1 - p))
    return 1 + cycle * repeats


class _Rounds:
    """Delivery matrices for a stage, cached when the channel is lossless."""

    def __init__(self, channel: Channel, stable: np.ndarray, rng, repeats: int = 1):
        self.channel, self.stable, self.rng, self.repeats = channel, stable, rng, repeats
        self._fixed = channel.matrix(restrict=stable).astype(np.float64) if channel.lossless else None
        self._count = None if self._fixed is None else np.asarray(self._fixed.sum(axis=1)).reshape(-1, 1)

    @property
    def fixed(self):
        return self._fixed

    def next(self):
        if self._fixed is not None:
            return self._fixed
        return self.channel.matrix(self.channel.sample_links(self.rng, self.repeats), restrict=self.stable)

    def next_with_count(self):
        if self._fixed is not None:
            return self._fixed, self._count
        return self.next(), None


def _diffuse(s0, rounds: _Rounds, T: int, ctau: float, lag: np.ndarray, keep_log: bool):
    """Run one diffusion stage of T local steps; returns final states, state log and sum drift."""
    n, P = s0.shape
    skew = int(lag.max()) if len(lag) else 0
    if rounds.fixed is not None and not skew:
        s, log, drift = proto.fixed_graph_session(s0, rounds.fixed, T, ctau)
        return s, (log if keep_log else None), drift
    s = np.array(s0, dtype=np.float64)
    log = np.empty((T + 1, n, P)) if keep_log else None
    if keep_log:
        log[0] = s
    drift = 0.0
    total = np.sum(s, axis=0, dtype=np.float64)
    rows = np.arange(n)
    for g in range(T + skew):
        recv, count = rounds.next_with_count()
        new = proto.swarm_diffusion_step(s, recv, ctau, count)
        if skew:
            active = (g >= lag) & (g - lag < T)
            new = np.where(active[:, None], new, s)
        s = new
        if keep_log:
            if skew:
                local = g - lag + 1
                ok = active
                log[local[ok], rows[ok]] = s[ok]
            else:
                log[g + 1] = s
        with np.errstate(invalid="ignore", over="ignore"):
            new_total = s.sum(axis=0)
            step_drift = float(np.abs(new_total - total).max())
        drift = max(drift, step_drift) if step_drift == step_drift and step_drift != np.inf else float("inf")
        total = new_total
    return s, log, drift


def run(cfg: SimConfig, table: proto.CentroidTable | None = None, keep_traces: bool = False,
        positions: np.ndarray | None = None) -> RunResult:
    """Simulate one seeded run. ``positions`` overrides the placement (static agents)."""
    rng = np.random.default_rng(cfg.seed)
    params = cfg.protocol
    arena = cfg.arena
    n, P, T, B = cfg.n_agents, params.P, params.T, params.B
    mobile = cfg.mobile and positions is None
    pos = np.array(positions, dtype=float) if positions is not None else initial_positions(cfg, rng)
    if len(pos) != n:
        raise ValueError("positions must have n_agents rows")
    motion = MotionState.start(pos, rng) if mobile else None
    mparams = MotionParams.from_config(cfg) if mobile else None
    if mobile:
        advance(motion, arena, mparams, cfg.seeding_kt, rng)
        pos = motion.pos
    lag = rng.integers(0, cfg.clock_skew_max + 1, n) if cfg.clock_skew_max > 0 else np.zeros(n, dtype=np.int64)

    indiv_hist = np.full((cfg.I, n), np.nan)
    cons_hist = np.full((cfg.I, n), np.nan)
    status_hist = np.zeros((cfg.I, n, P), dtype=np.int8)
    records, traces = [], []
    t_kt = cfg.seeding_kt if mobile else 0
    for it in range(cfg.I):
        t_kt += cfg.waiting_kt
        if mobile:
            advance(motion, arena, mparams, cfg.short_walk_kt, rng)
            pos = motion.pos
            t_kt += cfg.short_walk_kt
        geo = build_graph(pos, cfg.sigma)
        channel = Channel(pos, cfg.sigma, rng, cfg.msg_success_prob, cfg.per_step_msg_budget,
                          cfg.asym_link_jitter)

        def deliver(r, k):
            return channel.dense(channel.sample_links(rng))

        slots = cfg.handshake_slots or auto_slots(channel, cfg.max_neighbors)
        stable = proto.handshake(n, cfg.handshake_rounds, slots, deliver, rng,
                                 cfg.max_neighbors, cfg.handshake_quorum)
        t_kt += cfg.handshake_rounds * cfg.handshake_round_kt
        sym = stable | stable.T
        sg = CommGraph(sym)
        try:
            spec = spectrum(sg)
            o_l2, o_lmax = spec.fiedler_value, spec.lambda_max
        except ValueError:
            o_l2 = o_lmax = float("nan")
        rounds = _Rounds(channel, stable, rng, cfg.diffusion_repeats)

        s_pre = rng.choice(np.array([-1.0, 1.0]), size=(n, P))
        sT, _, _ = _diffuse(s_pre, rounds, T, params.ctau, lag, keep_log=False)
        t_kt += cfg.diffusion_kt
        with np.errstate(invalid="ignore", over="ignore"):
            s0 = proto.pre_diffusion_recenter(s_pre, sT)
        s_end, log, drift = _diffuse(s0, rounds, T, params.ctau, lag, keep_log=True)
        if keep_traces:
            traces.append({"iteration": it, "start_kt": t_kt, "s": log, "positions": np.array(pos),
                           "handshake_kt": t_kt - cfg.diffusion_kt - cfg.handshake_rounds * cfg.handshake_round_kt})
        t_kt += cfg.diffusion_kt

        lam, _, _, status = proto.fit_decay(np.abs(log).reshape(T + 1, n * P), params.tau, B, params.c,
                                            params.mse_guard, params.fit_min_window)
        lam = lam.reshape(n, P)
        status = status.reshape(n, P)
        status_hist[it] = status
        with np.errstate(invalid="ignore"):
            ok = np.isfinite(lam)
            cnt = ok.sum(axis=1)
            indiv = np.where(cnt > 0, np.where(ok, lam, 0.0).sum(axis=1) / np.maximum(cnt, 1), np.nan)
        indiv_hist[it] = indiv

        v = indiv.copy()
        cons_rounds = _Rounds(channel, stable, rng, cfg.consensus_repeats)
        for _ in range(params.C):
            v = proto.swarm_consensus_round(v, cons_rounds.next())
        cons_hist[it] = v
        t_kt += 2 * cfg.consensus_kt

        divergent = np.isin(status, [int(s) for s in proto.DIVERGENT_STATUSES])
        records.append(IterationRecord(
            mean_degree=float(geo.degrees.mean()),
            components=connected_components(geo)[0],
            stable_mean_degree=float(stable.sum(axis=1).mean()),
            stable_components=connected_components(sg)[0],
            stable_symmetric=bool(np.array_equal(stable, stable.T)),
            oracle_lambda2=float(o_l2),
            oracle_lambda_max=float(o_lmax),
            max_sum_drift=float(drift),
            divergent_fits=int(divergent.sum()),
            degenerate_fits=int((status == proto.FitStatus.DEGENERATE).sum()),
            swarm_mean_indiv=float(np.nanmean(indiv)) if np.isfinite(indiv).any() else float("nan"),
        ))

    final = np.array([proto.final_lambda2(cons_hist[:, i]) for i in range(n)])
    res = RunResult(shape=cfg.shape, seed=cfg.seed, config=cfg.to_dict(), final_lambda2=final,
                    indiv_history=indiv_hist, consensus_history=cons_hist, fit_status=status_hist,
                    iterations=records, positions=np.array(pos), divergence_threshold=cfg.divergence_threshold,
                    traces=traces)
    if table is not None:
        res.classify(table)
    return res

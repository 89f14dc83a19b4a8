"""Experiment harness: centroids, classification campaigns, (N, sigma) sweeps,
shape rankings, dispersion-mode comparisons and neighbor statistics.

Every run gets its seed from ``derive_seed(base, stream, ...)`` so results do
not depend on scheduling or on the number of worker processes.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import shapely
from shapely.geometry import MultiPoint

from . import protocol as proto
from .geometry import Arena, ShapeKind
from .sim.config import SimConfig
from .sim.engine import majority_vote, run

ALPHA_BOUNDARIES = (7.5, 17.0, 32.0)
BAND_LABELS = ("alpha<7.5", "7.5<=alpha<17", "17<=alpha<32", "alpha>=32")
DIVERGENT = "Divergent"

# seed streams
CENTROIDS, CAMPAIGN, SWEEP = 0, 1, 2


def derive_seed(base: int, *keys: int) -> int:
    """Independent 63-bit seed for the work item identified by ``keys``."""
    ss = np.random.SeedSequence(entropy=int(base), spawn_key=tuple(int(k) for k in keys))
    hi, lo = ss.generate_state(2, np.uint32)
    return int((int(hi) << 31) ^ int(lo)) & ((1 << 63) - 1)


def alpha(n: int, sigma: float, surface: float) -> float:
    return n * math.pi * sigma ** 2 / surface


def alpha_band(a: float) -> int:
    return int(np.searchsorted(ALPHA_BOUNDARIES, a, side="right"))


def sigma_for_alpha(a: float, n: int, surface: float) -> float:
    return math.sqrt(a * surface / (n * math.pi))


# --- running -----------------------------------------------------------------------

@dataclass
class RunSummary:
    shape: str
    seed: int
    run_value: float
    run_values_by_iter: list
    diverged: bool
    divergence_fraction: float
    finals: np.ndarray
    mean_degree: float
    mean_components: float
    positions: np.ndarray

    def predict(self, table: proto.CentroidTable) -> str:
        if not np.isfinite(self.finals).any():
            return proto.UNCLASSIFIED
        labels = [c.value if isinstance(c, ShapeKind) else c for c in proto.classify_many(self.finals, table)]
        return majority_vote(labels)

    def to_dict(self) -> dict:
        d = {"shape": self.shape, "seed": self.seed, "run_value": _num(self.run_value),
             "run_values_by_iter": [_num(v) for v in self.run_values_by_iter], "diverged": self.diverged,
             "divergence_fraction": self.divergence_fraction, "mean_degree": self.mean_degree,
             "mean_components": self.mean_components}
        return d


def _num(v):
    return None if v is None or not math.isfinite(v) else float(v)


def simulate(cfg: SimConfig) -> RunSummary:
    r = run(cfg)
    return RunSummary(
        shape=cfg.shape, seed=cfg.seed, run_value=r.run_value,
        run_values_by_iter=[r.run_value_after(x) for x in range(1, cfg.I + 1)],
        diverged=r.diverged, divergence_fraction=r.divergence_fraction, finals=r.final_lambda2,
        mean_degree=float(np.mean([it.mean_degree for it in r.iterations])),
        mean_components=float(np.mean([it.components for it in r.iterations])),
        positions=r.positions,
    )


def run_batch(configs: list, jobs: int = 1) -> list:
    """Simulate ``configs`` in order; ``jobs > 1`` uses a process pool (same results)."""
    if jobs <= 1 or len(configs) <= 1:
        return [simulate(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(simulate, configs, chunksize=max(1, len(configs) // (4 * jobs))))


def _shape_list(shapes) -> list:
    return [ShapeKind.parse(s).value for s in shapes]


def _shape_index(shape: str) -> int:
    return list(ShapeKind).index(ShapeKind.parse(shape))


def seeded_configs(base: SimConfig, shapes, runs: int, seed: int, stream: int, *cell) -> list:
    return [base.with_overrides({"shape": s, "seed": derive_seed(seed, stream, *cell, _shape_index(s), r)})
            for s in _shape_list(shapes) for r in range(runs)]


# --- centroids -----------------------------------------------------------------------

def centroids_from_runs(summaries: list, shapes) -> dict:
    """Mean run value per shape over non-divergent runs; shapes with none are left out."""
    out = {}
    for s in _shape_list(shapes):
        vals = [r.run_value for r in summaries if r.shape == s and not r.diverged and math.isfinite(r.run_value)]
        if vals:
            out[s] = float(np.mean(vals))
        else:
            warnings.warn(f"all runs divergent or unclassifiable for {s}; shape omitted", RuntimeWarning)
    return out


def compute_centroids(base: SimConfig, shapes, runs: int = 64, seed: int = 0, jobs: int = 1):
    """Centroid table from ``runs`` seeded runs per shape. Returns (table, run summaries)."""
    if runs < 2:
        raise ValueError("runs must be >= 2")
    summaries = run_batch(seeded_configs(base, shapes, runs, seed, CENTROIDS), jobs)
    return proto.CentroidTable(centroids_from_runs(summaries, shapes)), summaries


def centroid_standard_errors(summaries: list, shapes) -> dict:
    out = {}
    for s in _shape_list(shapes):
        vals = np.array([r.run_value for r in summaries if r.shape == s and not r.diverged
                         and math.isfinite(r.run_value)])
        out[s] = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("nan")
    return out


# --- classification ----------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    labels: list
    counts: np.ndarray  # rows: true shape; columns: labels + [Unclassified]

    @property
    def columns(self) -> list:
        return list(self.labels) + [proto.UNCLASSIFIED]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        k = len(self.labels)
        return float(np.trace(self.counts[:, :k]) / self.total) if self.total else float("nan")

    @classmethod
    def from_predictions(cls, labels, truth, predicted) -> "ConfusionMatrix":
        labels = list(labels)
        cols = labels + [proto.UNCLASSIFIED]
        counts = np.zeros((len(labels), len(cols)), dtype=np.int64)
        for t, p in zip(truth, predicted):
            counts[labels.index(t), cols.index(p) if p in cols else len(labels)] += 1
        return cls(labels, counts)

    def to_dict(self) -> dict:
        return {"labels": self.labels, "columns": self.columns, "counts": self.counts.tolist(),
                "accuracy": self.accuracy}


def classification_campaign(base: SimConfig, shapes, table: proto.CentroidTable, runs: int = 64,
                            seed: int = 0, jobs: int = 1):
    """Fresh-seeded runs per shape, each classified by the agents' majority vote."""
    shapes = _shape_list(shapes)
    missing = [s for s in shapes if ShapeKind.parse(s) not in table.entries]
    if missing:
        raise ValueError(f"centroid table lacks {missing}")
    summaries = run_batch(seeded_configs(base, shapes, runs, seed, CAMPAIGN), jobs)
    predicted = [r.predict(table) for r in summaries]
    cm = ConfusionMatrix.from_predictions(shapes, [r.shape for r in summaries], predicted)
    return cm, summaries, predicted


def leave_one_out(summaries: list, shapes) -> ConfusionMatrix:
    """Classify every run against centroids computed without that run."""
    shapes = _shape_list(shapes)
    by_shape = {s: [r for r in summaries if r.shape == s] for s in shapes}
    good = {s: [r.run_value for r in rs if not r.diverged and math.isfinite(r.run_value)] for s, rs in by_shape.items()}
    truth, pred = [], []
    for s in shapes:
        for r in by_shape[s]:
            entries = {}
            for t in shapes:
                vals = list(good[t])
                if t == s and not r.diverged and math.isfinite(r.run_value):
                    vals.remove(r.run_value)
                if vals:
                    entries[t] = float(np.mean(vals))
            truth.append(s)
            pred.append(r.predict(proto.CentroidTable(entries)) if entries else proto.UNCLASSIFIED)
    return ConfusionMatrix.from_predictions(shapes, truth, pred)


# --- rankings ------------------------------------------------------------------------------

def rank_shapes(centroids: dict) -> dict:
    """Ascending rank (0 = lowest centroid) per shape; ties broken by shape order."""
    items = sorted(centroids.items(), key=lambda kv: (kv[1], _shape_index(kv[0])))
    return {ShapeKind.parse(k).value: i for i, (k, _) in enumerate(items)}


def ordering(centroids: dict) -> list:
    ranks = rank_shapes(centroids)
    return sorted(ranks, key=ranks.get)


# --- sweeps --------------------------------------------------------------------------------

@dataclass
class CellResult:
    n: int
    sigma: float
    surface: float
    accuracy: float | None
    divergent_frac: float
    mean_degree: float
    mean_components: float
    centroids: dict
    runs: int
    confusion: ConfusionMatrix | None = None
    run_values: dict = field(default_factory=dict)
    divergent_by_shape: dict = field(default_factory=dict)

    @property
    def alpha(self) -> float:
        return alpha(self.n, self.sigma, self.surface)

    @property
    def band(self) -> int:
        return alpha_band(self.alpha)

    @property
    def divergent(self) -> bool:
        return self.divergent_frac > 0.5

    @property
    def ranks(self) -> dict:
        return rank_shapes(self.centroids) if len(self.centroids) >= 1 else {}

    def row(self, shapes) -> dict:
        row = {"N": self.n, "sigma_mm": self.sigma, "alpha": round(self.alpha, 6),
               "band": BAND_LABELS[self.band],
               "accuracy": DIVERGENT if self.divergent else _fmt(self.accuracy),
               "divergent_frac": _fmt(self.divergent_frac), "mean_degree": _fmt(self.mean_degree),
               "mean_components": _fmt(self.mean_components)}
        ranks = self.ranks
        for s in _shape_list(shapes):
            row[f"centroid_{s}"] = _fmt(self.centroids.get(s))
            row[f"rank_{s}"] = ranks.get(s, "")
            row[f"divergent_{s}"] = _fmt(self.divergent_by_shape.get(s))
        return row


def _fmt(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return f"{v:.6g}" if isinstance(v, float) else v


@dataclass
class SweepGrid:
    n_values: list
    sigma_values: list
    surface: float
    shapes: list
    cells: list

    def cell(self, n, sigma) -> CellResult:
        for c in self.cells:
            if c.n == n and c.sigma == sigma:
                return c
        raise KeyError((n, sigma))

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = [c.row(self.shapes) for c in self.cells]
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()

    def best_cells(self, quantile: float = 0.9) -> list:
        """Non-divergent cells whose accuracy reaches the top decile of the grid."""
        ok = [c for c in self.cells if not c.divergent and c.accuracy is not None]
        if not ok:
            return []
        cut = np.quantile([c.accuracy for c in ok], quantile)
        return [c for c in ok if c.accuracy >= cut - 1e-12]

    def accuracy_map(self) -> dict:
        return {(c.n, c.sigma): (None if c.divergent else c.accuracy) for c in self.cells}


def run_cell(base: SimConfig, n: int, sigma: float, shapes, runs: int, seed: int, jobs: int = 1,
             cell_key=(0, 0)) -> CellResult:
    cfg = base.with_overrides({"n_agents": n, "sigma": sigma})
    summaries = run_batch(seeded_configs(cfg, shapes, runs, seed, SWEEP, *cell_key), jobs)
    return cell_from_runs(cfg, summaries, shapes)


def cell_from_runs(cfg: SimConfig, summaries: list, shapes) -> CellResult:
    div_frac = float(np.mean([r.diverged for r in summaries]))
    cents = centroids_from_runs(summaries, shapes) if div_frac < 1 else {}
    cm = leave_one_out(summaries, shapes) if cents else None
    return CellResult(n=cfg.n_agents, sigma=cfg.sigma, surface=cfg.surface,
                      accuracy=None if cm is None else cm.accuracy, divergent_frac=div_frac,
                      mean_degree=float(np.mean([r.mean_degree for r in summaries])),
                      mean_components=float(np.mean([r.mean_components for r in summaries])),
                      centroids=cents, runs=len(summaries), confusion=cm,
                      run_values={s: [r.run_value for r in summaries if r.shape == s] for s in _shape_list(shapes)},
                      divergent_by_shape={s: float(np.mean([r.diverged for r in summaries if r.shape == s]))
                                          for s in _shape_list(shapes) if any(r.shape == s for r in summaries)})


def sweep(base: SimConfig, n_values, sigma_values, shapes, runs: int = 64, seed: int = 0, jobs: int = 1,
          progress=None) -> SweepGrid:
    """Per cell: ``runs`` runs per shape, leave-one-out accuracy and the divergence filter.

    All runs of the grid are submitted together so the pool stays busy.
    """
    shapes = _shape_list(shapes)
    plan = []
    for a, n in enumerate(n_values):
        for b, sigma in enumerate(sigma_values):
            cfg = base.with_overrides({"n_agents": int(n), "sigma": float(sigma)})
            plan.append((cfg, seeded_configs(cfg, shapes, runs, seed, SWEEP, a, b)))
    flat = [c for _, cs in plan for c in cs]
    results = run_batch(flat, jobs)
    cells, k = [], 0
    for cfg, cs in plan:
        cells.append(cell_from_runs(cfg, results[k:k + len(cs)], shapes))
        k += len(cs)
        if progress:
            progress(cells[-1])
    return SweepGrid([int(n) for n in n_values], [float(s) for s in sigma_values], base.surface, shapes, cells)


# --- dispersion modes and neighbor statistics --------------------------------------------------

def voronoi_areas(points, arena: Arena) -> np.ndarray:
    """Areas of the Voronoi cells of ``points`` clipped to the arena, in input order."""
    pts = np.asarray(points, dtype=float)
    region = arena.polygon
    if len(pts) == 1:
        return np.array([region.area])
    cells = shapely.voronoi_polygons(MultiPoint(pts), extend_to=region, ordered=True)
    polys = shapely.get_parts(cells)
    return np.array([p.intersection(region).area for p in polys])


def neighbor_stats(points, sigma: float, arena: Arena) -> dict:
    from scipy.spatial.distance import pdist, squareform

    pts = np.asarray(points, dtype=float)
    d = squareform(pdist(pts))
    np.fill_diagonal(d, np.inf)
    degree = (d <= sigma).sum(axis=1)
    areas = voronoi_areas(pts, arena)
    return {"mean_degree": float(degree.mean()), "d_min_over_sigma": float((d.min(axis=1) / sigma).mean()),
            "voronoi_mean_area": float(areas.mean()), "voronoi_std_area": float(areas.std()),
            "voronoi_area_sum": float(areas.sum())}


def dispersion_comparison(bases: dict, n_values, sigma_values, shapes, runs: int = 64, seed: int = 0,
                          jobs: int = 1) -> dict:
    """Sweep each placement mode on the same grid; report accuracy differences and neighbor stats.

    ``bases`` maps a mode name to its base config. Differences are ``a - b`` per
    cell for every ordered pair, with divergent cells left as None.
    """
    grids = {m: sweep(cfg, n_values, sigma_values, shapes, runs, seed, jobs) for m, cfg in bases.items()}
    diffs = {}
    modes = list(grids)
    for a in modes:
        for b in modes:
            if a == b:
                continue
            da, db = grids[a].accuracy_map(), grids[b].accuracy_map()
            diffs[(a, b)] = {k: (None if da[k] is None or db[k] is None else da[k] - db[k]) for k in da}
    return {"grids": grids, "differences": diffs}


def iteration_convergence(summaries: list, shape: str | None = None):
    """Std across runs of the run value after x iterations, and the fitted exponent k in std ~ x^-k."""
    rows = [r.run_values_by_iter for r in summaries if shape is None or r.shape == shape]
    vals = np.array(rows, dtype=float)
    xs = np.arange(1, vals.shape[1] + 1)
    stds = np.array([np.nanstd(vals[:, i], ddof=1) for i in range(vals.shape[1])])
    ok = np.isfinite(stds) & (stds > 0)
    k = -np.polyfit(np.log(xs[ok]), np.log(stds[ok]), 1)[0] if ok.sum() >= 2 else float("nan")
    return xs, stds, float(k)


# --- output ------------------------------------------------------------------------------------

def campaign_report(cm: ConfusionMatrix, table: proto.CentroidTable, summaries: list, predicted: list) -> dict:
    return {
        "confusion": cm.to_dict(),
        "centroids": {k.value: v for k, v in table.entries.items()},
        "runs": [dict(r.to_dict(), predicted=p) for r, p in zip(summaries, predicted)],
    }


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, ConfusionMatrix):
        return o.to_dict()
    raise TypeError(type(o))

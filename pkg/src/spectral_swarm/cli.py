"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 when every run ended
divergent or unclassifiable.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import protocol as proto
from .geometry import ShapeKind
from .sim import engine
from .sim.config import FIELD_DOCS, PROFILE_SHAPES, PROFILES, ConfigError, SimConfig, profile_config
from .sim.led import led_color
from .spectral import build_graph, connected_components, spectrum

OUTPUT_ENV = "SPECTRAL_SWARM_OUTPUT_DIR"
DEFAULT_OUTPUT = "spectral_swarm_out"
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _keys_help() -> str:
    lines = ["config keys (KEY=VALUE overrides; any *_kt key also accepts *_s in seconds):"]
    width = max(len(k) for k in FIELD_DOCS)
    for key, (units, text) in FIELD_DOCS.items():
        lines.append(f"  {key:<{width}}  [{units}]  {text}")
    lines.append(f"profiles: {', '.join(sorted(PROFILES))}")
    lines.append(f"default output directory: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT}")
    return "\n".join(lines)


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list: {text!r}") from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (keys as listed below; may name a 'profile')")
    common.add_argument("--profile", choices=sorted(PROFILES), help="start from a named profile")
    common.add_argument("--seed", type=int, help="base seed (64-bit)")
    common.add_argument("--output-dir", help="where result files go")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    common.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="config overrides")

    p = _Parser(prog="spectral-swarm", description="Swarm shape classification by distributed lambda_2 estimation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    kw = dict(parents=[common], epilog=_keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter)

    r = sub.add_parser("run", help="one seeded run", **kw)
    r.add_argument("--centroids", help="centroid table JSON; enables classification")

    for name, text in (("centroids", "regenerate a centroid table"), ("campaign", "classification campaign")):
        c = sub.add_parser(name, help=text, **kw)
        c.add_argument("--shapes", type=_csv_list(str), help="comma-separated shapes")
        c.add_argument("--runs", type=int, default=64, help="runs per shape")
        if name == "campaign":
            c.add_argument("--centroids", help="centroid table JSON (regenerated with a disjoint seed stream if absent)")

    s = sub.add_parser("sweep", help="(N, sigma) grid sweep", **kw)
    s.add_argument("--n-values", type=_csv_list(int))
    s.add_argument("--sigma-values", type=_csv_list(float))
    s.add_argument("--shapes", type=_csv_list(str))
    s.add_argument("--runs", type=int, help="runs per shape and cell (default 64)")

    o = sub.add_parser("oracle", help="exact lambda_2 of a sampled placement", **kw)
    o.add_argument("--shape")
    o.add_argument("--surface", type=float)
    o.add_argument("--n", type=int)
    o.add_argument("--sigma", type=float)
    o.add_argument("--placement", default="random")

    e = sub.add_parser("export-traces", help="per-step diffusion traces of one run", **kw)
    e.add_argument("--centroids", help="centroid table JSON; sets the LED of the estimate records")
    return p


# --- config layering ---------------------------------------------------------------

def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: expected a JSON object")
    return data


def _parse_overrides(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override must be KEY=VALUE: {item}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def load_config(args, extra_keys=()) -> tuple[SimConfig, dict, str | None]:
    """defaults < profile < config file < KEY=VALUE overrides < --seed.

    Returns the config, any ``extra_keys`` found in the file, and the profile name.
    """
    data = _read_json(args.config) if args.config else {}
    extras = {k: data.pop(k) for k in extra_keys if k in data}
    profile = data.pop("profile", None) or args.profile
    cfg = profile_config(profile) if profile else SimConfig()
    cfg = cfg.with_overrides(data).with_overrides(_parse_overrides(args.overrides))
    if args.seed is not None:
        cfg = cfg.with_overrides({"seed": args.seed})
    return cfg, extras, profile


def _shapes(args, profile, extras=None) -> list:
    shapes = getattr(args, "shapes", None) or (extras or {}).get("shapes")
    if not shapes:
        shapes = PROFILE_SHAPES.get(profile, ["Disk", "Annulus"])
    try:
        return [ShapeKind.parse(s).value for s in shapes]
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _out_dir(args) -> Path:
    d = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_table(path) -> proto.CentroidTable:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"centroid table not found: {p}")
    try:
        return proto.CentroidTable.from_json(p.read_text())
    except (ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"{p}: {e}") from None


def _fmt(v) -> str:
    return "nan" if v is None or not math.isfinite(v) else f"{v:.6g}"


# --- subcommands ----------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg, _, _ = load_config(args)
    table = _load_table(args.centroids) if args.centroids else None
    res = engine.run(cfg, table)
    out = _out_dir(args)
    (out / "run.json").write_text(res.to_json() + "\n")
    line = f"final_lambda2={_fmt(res.run_value)} shape={cfg.shape}"
    if res.predicted is not None:
        line += f" predicted={res.predicted}"
    print(line)
    return EXIT_OK if math.isfinite(res.run_value) else EXIT_DIVERGENT


def cmd_centroids(args) -> int:
    cfg, _, profile = load_config(args)
    shapes = _shapes(args, profile)
    if args.runs < 2:
        raise ConfigError("--runs must be >= 2")
    table, runs = ex.compute_centroids(cfg, shapes, args.runs, cfg.seed, args.jobs)
    out = _out_dir(args)
    (out / "centroids.json").write_text(table.to_json() + "\n")
    report = {"centroids": {k.value: v for k, v in table.entries.items()},
              "standard_errors": ex.centroid_standard_errors(runs, shapes),
              "runs": [r.to_dict() for r in runs], "config": cfg.to_dict()}
    (out / "centroid_runs.json").write_text(ex.dumps(report) + "\n")
    print("centroids " + " ".join(f"{k.value}={_fmt(v)}" for k, v in table.entries.items()))
    return EXIT_OK if len(table) else EXIT_DIVERGENT


def cmd_campaign(args) -> int:
    cfg, _, profile = load_config(args)
    shapes = _shapes(args, profile)
    if args.centroids:
        table = _load_table(args.centroids)
    else:
        table, _ = ex.compute_centroids(cfg, shapes, max(args.runs, 2), cfg.seed, args.jobs)
    try:
        cm, runs, predicted = ex.classification_campaign(cfg, shapes, table, args.runs, cfg.seed, args.jobs)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = _out_dir(args)
    report = ex.campaign_report(cm, table, runs, predicted)
    report["config"] = cfg.to_dict()
    (out / "campaign.json").write_text(ex.dumps(report) + "\n")
    print(f"accuracy={cm.accuracy:.4f} runs={cm.total}")
    return EXIT_DIVERGENT if all(p == proto.UNCLASSIFIED for p in predicted) else EXIT_OK


def cmd_sweep(args) -> int:
    cfg, extras, profile = load_config(args, extra_keys=("grid",))
    grid = extras.get("grid", {})
    if not isinstance(grid, dict):
        raise ConfigError("'grid' must be an object")
    n_values = args.n_values or grid.get("n_values")
    sigma_values = args.sigma_values or grid.get("sigma_values")
    if not n_values or not sigma_values:
        raise ConfigError("sweep needs n_values and sigma_values (grid object or --n-values/--sigma-values)")
    runs = args.runs or grid.get("runs", 64)
    shapes = _shapes(args, profile, grid)
    res = ex.sweep(cfg, n_values, sigma_values, shapes, int(runs), cfg.seed, args.jobs)
    out = _out_dir(args)
    (out / "sweep.csv").write_text(res.to_csv())
    payload = {"n_values": res.n_values, "sigma_values": res.sigma_values, "surface": res.surface,
               "shapes": res.shapes, "runs": int(runs), "config": cfg.to_dict(),
               "cells": [dict(c.row(shapes), confusion=c.confusion) for c in res.cells]}
    (out / "sweep.json").write_text(ex.dumps(payload) + "\n")
    best = res.best_cells()
    n_div = sum(c.divergent for c in res.cells)
    med = float(np.median([c.alpha for c in best])) if best else float("nan")
    print(f"cells={len(res.cells)} divergent={n_div} best_alpha_median={_fmt(med)}")
    return EXIT_DIVERGENT if n_div == len(res.cells) else EXIT_OK


def cmd_oracle(args) -> int:
    cfg, _, _ = load_config(args)
    over = {k: v for k, v in (("shape", args.shape), ("surface", args.surface), ("n_agents", args.n),
                              ("sigma", args.sigma), ("placement", args.placement)) if v is not None}
    cfg = cfg.with_overrides(over)
    rng = np.random.default_rng(cfg.seed)
    pos = engine.initial_positions(cfg, rng)
    g = build_graph(pos, cfg.sigma)
    lam = spectrum(g).fiedler_value
    comps = connected_components(g)[0]
    out = _out_dir(args)
    payload = {"shape": cfg.shape, "surface": cfg.surface, "n_agents": cfg.n_agents, "sigma": cfg.sigma,
               "placement": cfg.placement, "seed": cfg.seed, "lambda2": lam, "components": comps,
               "mean_degree": float(g.degrees.mean()), "alpha": cfg.alpha, "positions": pos.tolist()}
    (out / "oracle.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    print(f"lambda2={lam:.10g} components={comps} mean_degree={g.degrees.mean():.4g}")
    return EXIT_OK


def cmd_export_traces(args) -> int:
    cfg, _, _ = load_config(args)
    table = _load_table(args.centroids) if args.centroids else None
    res = engine.run(cfg, keep_traces=True)
    out = _out_dir(args)
    step_kt = cfg.step_kt
    with open(out / "traces.jsonl", "w") as fh:
        for tr in res.traces:
            it, s = tr["iteration"], tr["s"]
            for step in range(s.shape[0]):
                kt = tr["start_kt"] + step * step_kt
                for agent in range(s.shape[1]):
                    for d in range(s.shape[2]):
                        v = float(s[step, agent, d])
                        fh.write(json.dumps({"agent": agent, "iteration": it, "session": d, "step": step,
                                             "s": v if math.isfinite(v) else None, "kilotick": int(kt)},
                                            sort_keys=True) + "\n")
        for it in range(cfg.I):
            final = res.final_after(it + 1)
            for agent in range(cfg.n_agents):
                shape = proto.classify(float(final[agent]), table) if table else None
                rec = {"agent": agent, "iteration": it, "indiv": res.indiv_history[it, agent],
                       "consensus": res.consensus_history[it, agent], "final": final[agent],
                       "led": led_color(proto.Stage.CONSENSUS, shape=shape)}
                rec = {k: (None if isinstance(v, float) and not math.isfinite(v) else
                           (float(v) if isinstance(v, (float, np.floating)) else v)) for k, v in rec.items()}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "positions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "kilotick", "agent", "x_mm", "y_mm", "led"])
        for tr in res.traces:
            led = led_color(proto.Stage.HANDSHAKE)
            for agent, (x, y) in enumerate(tr["positions"]):
                w.writerow([cfg.seed, tr["handshake_kt"], agent, repr(float(x)), repr(float(y)), led])
    print(f"final_lambda2={_fmt(res.run_value)} shape={cfg.shape} traces={len(res.traces)}")
    return EXIT_OK if math.isfinite(res.run_value) else EXIT_DIVERGENT


COMMANDS = {"run": cmd_run, "centroids": cmd_centroids, "campaign": cmd_campaign, "sweep": cmd_sweep,
            "oracle": cmd_oracle, "export-traces": cmd_export_traces}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

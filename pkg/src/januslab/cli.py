"""Command-line experiment runner.

Subcommands: optimize, metrics, debias-prompt, ablate, render.
Exit codes: 0 success, 2 configuration/validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from .config import ConfigError, Scenario, default_example_table
from .distill import optimize, write_log
from .experiments import (GRID_ARMS, TRIO_ARMS, run_sweep, template_fit,
                          thread_count)
from .field import FieldFormatError, load_field, save_field
from .metrics import evaluate_turntable, get_distance, write_curve_csv
from .prompt import (PMIConfig, Prompt, TableLookupError, load_table, pmi,
                     debias_prompt)
from .render import ImageBuffer, turntable, write_ppm

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def contact_sheet(images, path, n: int = 12) -> None:
    """Horizontal strip of up to n evenly spaced turntable views."""
    step = max(1, len(images) // n)
    chosen = [images[i].data for i in range(0, len(images), step)][:n]
    write_ppm(ImageBuffer(np.concatenate(chosen, axis=1), "radiance"), path)


def curve_svg(curve, path, width: int = 640, height: int = 240) -> None:
    """Hand-rolled SVG polyline of the per-azimuth alignment curve."""
    curve = np.asarray(curve, dtype=float)
    lo, hi = float(curve.min()), float(curve.max())
    span = (hi - lo) or 1.0
    pts = []
    for i, v in enumerate(curve):
        x = 10 + (width - 20) * i / max(len(curve) - 1, 1)
        y = height - 10 - (height - 20) * (v - lo) / span
        pts.append(f"{x:.1f},{y:.1f}")
    with open(path, "w") as f:
        f.write(f'<svg xmlns="http://www.w3.org/2000/svg" '
                f'width="{width}" height="{height}">\n'
                f'<rect width="{width}" height="{height}" fill="white"/>\n'
                f'<polyline fill="none" stroke="black" stroke-width="1.5" '
                f'points="{" ".join(pts)}"/>\n</svg>\n')


def _scenario(args) -> Scenario:
    if args.config:
        sc = Scenario.from_file(args.config)
    else:
        sc = Scenario(dict(Scenario.from_defaults().values))
    if args.out:
        sc.values["out.dir"] = args.out
    if args.seed is not None:
        sc.values["seed"] = str(args.seed)
    return sc


def _outdir(scenario: Scenario) -> str:
    out = scenario.values["out.dir"]
    os.makedirs(out, exist_ok=True)
    return out


def cmd_optimize(args) -> int:
    scenario = _scenario(args)
    cfg = scenario.run_config()
    out = _outdir(scenario)
    _, templates, model = scenario.build_model()
    fld, records = optimize(cfg, model)
    seed = cfg.seed
    save_field(fld, os.path.join(out, f"field_seed{seed}.jlab"))
    write_log(records, os.path.join(out, f"log_seed{seed}.csv"))
    v = scenario.values
    images = turntable(fld, 12, math.radians(float(v["turntable.elevation_deg"])),
                       scenario.render_cfg(), radius=float(v["camera.radius"]),
                       fov_y=float(v["camera.fov_y"]),
                       image_size=scenario.image_size())
    contact_sheet(images, os.path.join(out, f"contact_seed{seed}.ppm"))
    print(f"wrote field, log and contact sheet to {out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    scenario = _scenario(args)
    fld = load_field(args.field)
    out = _outdir(scenario)
    _, templates, _ = scenario.build_model()
    v = scenario.values
    n_views = int(v["turntable.views"])
    elev = float(v["turntable.elevation_deg"])
    images = turntable(fld, n_views, math.radians(elev), scenario.render_cfg(),
                       radius=float(v["camera.radius"]),
                       fov_y=float(v["camera.fov_y"]),
                       image_size=scenario.image_size())
    distance = get_distance(v["metric.distance"])
    run_id = os.path.splitext(os.path.basename(args.field))[0]
    report = evaluate_turntable(run_id, images, templates, scenario.bins(),
                                elev, distance, float(v["metric.match_threshold"]))
    from .metrics import write_report_csv
    write_report_csv([report], os.path.join(out, f"metrics_{run_id}.csv"))
    write_curve_csv(report, os.path.join(out, f"curve_{run_id}.csv"))
    curve_svg(report.alignment_curve, os.path.join(out, f"curve_{run_id}.svg"))
    print(f"a_dist={report.a_dist:.6f} janus_bin_count={report.janus_bin_count} "
          f"janus_success={report.janus_success}")
    return EXIT_OK


def cmd_debias_prompt(args) -> int:
    table = load_table(args.table) if args.table else default_example_table()
    prompt = Prompt.from_string(args.prompt, args.protect or ())
    cfg = PMIConfig(threshold=args.threshold)
    result = debias_prompt(prompt, args.view, table, cfg)
    kept = set(result.words)
    writer = csv.writer(sys.stdout)
    writer.writerow(["word", "pmi", "kept"])
    for word in prompt.words:
        if word in prompt.protected:
            value = 1.0
        else:
            value = pmi(args.view, word, table)
        writer.writerow([word, f"{value:.4f}", int(word in kept)])
    return EXIT_OK


def cmd_ablate(args) -> int:
    scenario = _scenario(args)
    out = _outdir(scenario)
    seeds = scenario.seeds()
    arms = tuple(dict.fromkeys(GRID_ARMS + TRIO_ARMS))
    results = run_sweep(scenario, arms, seeds, thread_count(args.threads))
    with open(os.path.join(out, "ablation_summary.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["arm", "seed", "a_dist", "janus_bin_count",
                         "janus_success", "template_fit"])
        for r in results:
            writer.writerow([r["arm"], r["seed"], repr(r["a_dist"]),
                             r["janus_bin_count"], int(r["janus_success"]),
                             repr(r["template_fit"])])
    v = scenario.values
    elev = math.radians(float(v["turntable.elevation_deg"]))
    for r in results:
        if r["seed"] != seeds[0]:
            continue
        images = turntable(r["field"], 12, elev, scenario.render_cfg(),
                           radius=float(v["camera.radius"]),
                           fov_y=float(v["camera.fov_y"]),
                           image_size=scenario.image_size())
        contact_sheet(images, os.path.join(out, f"contact_{r['arm']}.ppm"))
    print(f"wrote ablation summary for {len(arms)} arms x {len(seeds)} seeds "
          f"to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    scenario = _scenario(args)
    fld = load_field(args.field)
    out = _outdir(scenario)
    v = scenario.values
    images = turntable(fld, args.views,
                       math.radians(float(v["turntable.elevation_deg"])),
                       scenario.render_cfg(), radius=float(v["camera.radius"]),
                       fov_y=float(v["camera.fov_y"]),
                       image_size=scenario.image_size())
    run_id = os.path.splitext(os.path.basename(args.field))[0]
    contact_sheet(images, os.path.join(out, f"turntable_{run_id}.ppm"),
                  n=args.views)
    print(f"wrote turntable strip to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="januslab",
        description="Desk-scale Janus-problem simulator: score distillation "
                    "against an analytic biased 2D score model.")
    parser.add_argument("--config", help="scenario config file (key = value)")
    parser.add_argument("--out", help="output directory (overrides out.dir)")
    parser.add_argument("--seed", type=int, help="override the scenario seed")
    parser.add_argument("--threads", type=int,
                        help="worker processes (JLAB_THREADS fallback)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("optimize", help="run score distillation, write field/log")

    p = sub.add_parser("metrics", help="evaluate a saved field's turntable")
    p.add_argument("field", help="path to a .jlab field file")

    p = sub.add_parser("debias-prompt", help="apply PMI word filtering")
    p.add_argument("prompt")
    p.add_argument("view", help='view prompt, e.g. "back view"')
    p.add_argument("--table", help="probability table CSV (default: built-in)")
    p.add_argument("--protect", action="append", help="protected word")
    p.add_argument("--threshold", type=float, default=0.95)

    sub.add_parser("ablate", help="run the debiasing arm grid and clip trio")

    p = sub.add_parser("render", help="render a turntable contact sheet")
    p.add_argument("field")
    p.add_argument("--views", type=int, default=12)
    return parser


COMMANDS = {
    "optimize": cmd_optimize,
    "metrics": cmd_metrics,
    "debias-prompt": cmd_debias_prompt,
    "ablate": cmd_ablate,
    "render": cmd_render,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FieldFormatError, TableLookupError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # pragma: no cover - unexpected runtime failures
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

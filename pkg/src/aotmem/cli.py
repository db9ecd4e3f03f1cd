"""Command-line front end.

    aotmem construct --n 5 --s 2 --d 2 --dh 2 --eps 0 --seed 7
    aotmem sweep --figure fig1a --csv fig1a.csv
    aotmem fit --csv fig1a.csv --form linear
    aotmem plot --csv fig1a.csv --x H --fit linear --bounds ours,previous,chance --out fig1a.svg

Every subcommand accepts ``--config file.json`` and ``--set key=value``
overrides (keys are the long option names with dashes as underscores).
Unknown keys exit with status 2, runtime failures with status 1.
"""
import argparse
import csv
import json
import sys

import numpy as np

from . import __version__
from .bounds import capacity_formulas, circle_encoder, encoder_lower_bound, phi, theorem2_bound
from .construct import ConstructionConfig, SKIP_MODES, build_memorizer, verify_memorizer
from .model import ModelConfig, param_count, params_from_json, params_to_json
from .numkernel import polyfit_ls
from .task import (make_association_task, make_noisy_lookup_task, smooth_task, task_from_json,
                   check_assumptions)
from .trainlab import SWEEP_COLUMNS, TrainConfig, figure_sweep, fit_scaling_law, read_sweep_csv, run_sweep, train_model

FIGURES = ("fig1a", "fig1b", "fig2a", "fig2b", "fig3", "fig4")


class ConfigError(ValueError):
    pass


# -- argument parsing -----------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one option")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output path")
    p.add_argument("--json", action="store_true", help="print a JSON result on stdout")


def _task_args(p):
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--s", type=int, default=2)
    p.add_argument("--task", help="task JSON (overrides --n/--s)")
    p.add_argument("--task-seed", type=int, default=None, help="seed of the generated task (default: --seed)")


def build_parser():
    parser = argparse.ArgumentParser(prog="aotmem", description="Attention-only transformer memorization toolkit")
    parser.add_argument("--version", action="version", version=f"aotmem {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("construct", help="build an exact memorizer")
    _common(p)
    _task_args(p)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--dh", type=int, default=2)
    p.add_argument("--eps", type=float, default=0.0)
    p.add_argument("--skip-mode", choices=SKIP_MODES, default="exact_basis")
    p.add_argument("--lam", type=float, default=20.0, help="scale of the circle target encoder")
    p.add_argument("--max-resample", type=int, default=10)
    p.add_argument("--cert", help="write the certificate JSON here")

    p = sub.add_parser("verify", help="measure a saved model on a task")
    _common(p)
    _task_args(p)
    p.add_argument("--model", required=False)
    p.add_argument("--lower-bound", type=float, default=None, help="floor reference (default: optimize)")
    p.add_argument("--expect-accuracy", type=float, default=None)

    p = sub.add_parser("bounds", help="encoder lower bound, lookup-table bound and capacity formulas")
    _common(p)
    _task_args(p)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--p", type=float, default=None, help="noisy lookup task with this correct-token mass")
    p.add_argument("--smooth", type=float, default=None, help="smooth the task by delta")
    p.add_argument("--h", type=int, default=None, help="head count for the capacity formulas")
    p.add_argument("--dh", type=int, default=None)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--steps", type=int, default=1000)

    p = sub.add_parser("train", help="train one model on an association task")
    _common(p)
    _task_args(p)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--dh", type=int, default=10)
    p.add_argument("--h", type=int, default=4)
    p.add_argument("--variant", choices=("aot", "mlp_based"), default="aot")
    p.add_argument("--width", type=int, default=0)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batches", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--init-scale", type=float, default=0.02)
    p.add_argument("--full", action="store_true", help="10 epochs of 1000 batches")

    p = sub.add_parser("sweep", help="run a figure sweep into a CSV")
    _common(p)
    p.add_argument("--figure", choices=FIGURES, required=False)
    p.add_argument("--csv", required=False)
    p.add_argument("--seeds", default="0,1")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--full", action="store_true")

    p = sub.add_parser("fit", help="least-squares fit of a sweep CSV")
    _common(p)
    p.add_argument("--csv", required=False)
    p.add_argument("--form", default="linear")
    p.add_argument("--x", default="H")
    p.add_argument("--where", action="append", default=[], metavar="COL=VALUE")
    p.add_argument("--capacity", action="store_true", help="fit stored-association counts instead of accuracy")
    p.add_argument("--max-fraction", type=float, default=None)

    p = sub.add_parser("plot", help="SVG scatter of a sweep CSV")
    _common(p)
    p.add_argument("--csv", required=False)
    p.add_argument("--x", default="H")
    p.add_argument("--y", default="final_accuracy")
    p.add_argument("--group-by", default=None)
    p.add_argument("--where", action="append", default=[], metavar="COL=VALUE")
    p.add_argument("--fit", default=None, help="overlay a fit of this form")
    p.add_argument("--bounds", default="", help="comma list of ours, previous, chance")
    p.add_argument("--title", default="")
    p.add_argument("--xlabel", default=None)
    p.add_argument("--ylabel", default=None)
    return parser


def _coerce(value, like):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes"):
            return True
        if str(value).lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(like, list):
        return value if isinstance(value, list) else [value]
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r}")
    return value


def resolve(parser, args):
    """Apply ``--config`` then ``--set`` on top of parsed defaults; explicit flags win."""
    explicit = {k for k, v in vars(args).items() if v != parser_defaults(parser, args.command).get(k)}
    overrides = {}
    if args.config:
        try:
            with open(args.config) as fh:
                overrides.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}")
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    ns = vars(args)
    for k, v in overrides.items():
        key = k.replace("-", "_")
        if key not in ns or key in ("config", "set", "command"):
            raise ConfigError(f"unknown option {k!r} for {args.command}")
        if key in explicit:
            continue
        like = ns[key]
        ns[key] = _coerce(v, like) if like is not None else v
    return args


_DEFAULTS = {}


def parser_defaults(parser, command):
    if command not in _DEFAULTS:
        _DEFAULTS[command] = vars(parser.parse_args([command]))
    return _DEFAULTS[command]


# -- helpers ------------------------------------------------------------------------

def _load_task(args, one_hot=True):
    if args.task:
        with open(args.task) as fh:
            return task_from_json(fh.read())
    seed = args.seed if args.task_seed is None else args.task_seed
    p = getattr(args, "p", None)
    if p is not None:
        return make_noisy_lookup_task(args.n, args.s, p, seed=seed)
    return make_association_task(args.n, args.s, seed=seed)


def _emit(args, result, text=None):
    if args.json:
        print(json.dumps(result, indent=2, default=_json_default))
    else:
        print(text if text is not None else json.dumps(result, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _log_resolved(args):
    cfg = {k: v for k, v in vars(args).items() if k not in ("set", "config")}
    sys.stderr.write(json.dumps({"aotmem": __version__, "resolved": cfg}, default=str) + "\n")


def _parse_where(items):
    conds = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--where expects COL=VALUE, got {item!r}")
        col, val = item.split("=", 1)
        if col not in SWEEP_COLUMNS:
            raise ConfigError(f"unknown column {col!r}")
        conds.append((col, val))

    def keep(r):
        return all(str(getattr(r, c)) == v or _num_eq(getattr(r, c), v) for c, v in conds)
    return keep if conds else None


def _num_eq(a, b):
    try:
        return float(a) == float(b)
    except ValueError:
        return False


def _need(args, *names):
    for n in names:
        if getattr(args, n) in (None, ""):
            raise ConfigError(f"--{n.replace('_', '-')} is required")


# -- subcommands ---------------------------------------------------------------------

def cmd_construct(args):
    task = _load_task(args)
    enc = circle_encoder(task, args.lam, d=args.d)
    cfg = ConstructionConfig(eps=args.eps, d=args.d, d_h=args.dh, skip_mode=args.skip_mode,
                             max_resample=args.max_resample, seed=args.seed)
    params, cert = build_memorizer(task, enc, cfg)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(params_to_json(params))
    result = cert.to_dict()
    result["params_raw"] = param_count(params.config, "raw")
    if args.cert:
        with open(args.cert, "w") as fh:
            json.dump(result, fh, indent=2, default=_json_default)
    ok = cert.solve_residual <= 1e-6 and (args.eps > 0 or cert.achieved_accuracy == 1.0)
    _emit(args, result)
    return 0 if ok else 1


def cmd_verify(args):
    _need(args, "model")
    with open(args.model) as fh:
        params = params_from_json(fh.read())
    task = _load_task(args)
    lb = args.lower_bound
    if lb is None:
        lb = encoder_lower_bound(task, params.config.d, restarts=2, steps=500, seed=args.seed)[0].lower_bound
    v = verify_memorizer(params, task, lb)
    result = dict(accuracy=v.accuracy, kl=v.kl, lower_bound_ref=v.lower_bound_ref, prop1_gap=v.prop1_gap,
                  floor_ok=v.floor_ok)
    ok = v.floor_ok and (args.expect_accuracy is None or (v.accuracy is not None and v.accuracy >= args.expect_accuracy))
    _emit(args, result)
    return 0 if ok else 1


def cmd_bounds(args):
    task = _load_task(args)
    if args.smooth:
        task = smooth_task(task, args.smooth)
    report, _ = encoder_lower_bound(task, args.d, restarts=args.restarts, steps=args.steps, seed=args.seed)
    result = {"N": task.N, "S": task.S, "T0": task.T0, "d": args.d, "lower_bound": report.lower_bound}
    if check_assumptions(task).assumption2:
        try:
            t2, _ = theorem2_bound(task, args.d, seed=args.seed)
            result.update(theorem2_full=t2.theorem2_full, theorem2_simplified=t2.theorem2_simplified,
                          C_jl=t2.C_jl, C_target=t2.C_target)
        except ValueError as exc:
            result["theorem2_error"] = str(exc)
    if args.h is not None:
        dh = args.dh if args.dh is not None else args.d
        cap = capacity_formulas(args.h, dh, args.d, task.N, task.S, task.T0)
        result["capacity"] = dict(ours=cap.ours, previous=cap.previous, kim_params=cap.kim_params,
                                  huben_params=cap.huben_params, phi_bound=cap.phi_bound)
    _emit(args, result)
    return 0


def cmd_train(args):
    task = _load_task(args)
    width = args.width
    if args.variant == "mlp_based" and width < 1:
        raise ConfigError("--width is required for the mlp_based variant")
    config = ModelConfig(task.N, task.S, args.d, args.dh, args.h, args.variant, width)
    if args.full:
        tc = TrainConfig(seeds=(args.seed,), batch_size=args.batch_size, lr=args.lr, init_scale=args.init_scale)
    else:
        tc = TrainConfig(epochs=args.epochs, batches_per_epoch=args.batches, batch_size=args.batch_size,
                         lr=args.lr, init_scale=args.init_scale, seeds=(args.seed,))
    params, res = train_model(config, task, tc, seed=args.seed)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(params_to_json(params))
    result = dict(final_accuracy=res.final_accuracy, final_kl=res.final_kl, steps=res.steps,
                  accuracy_curve=res.accuracy_curve, loss_curve=res.loss_curve, kl_curve=res.kl_curve,
                  wall_seconds=res.wall_seconds, params_raw=param_count(config, "raw"),
                  phi_ours=float(phi(args.h * args.dh + args.d, task.N, task.T0)))
    _emit(args, result)
    return 0


def cmd_sweep(args):
    _need(args, "figure", "csv")
    seeds = tuple(int(s) for s in str(args.seeds).split(",") if s.strip())
    spec = figure_sweep(args.figure, full=args.full, csv_path=args.csv, seeds=seeds, parallelism=args.threads)
    recs = run_sweep(spec)
    failed = [r for r in recs if r.error]
    result = dict(figure=args.figure, rows=len(recs), failed=len(failed), csv=args.csv,
                  errors=[r.error for r in failed])
    _emit(args, result)
    return 1 if failed else 0


def cmd_fit(args):
    _need(args, "csv")
    recs = read_sweep_csv(args.csv)
    fit = fit_scaling_law(recs, args.form, x_column=args.x, capacity_units=args.capacity,
                          where=_parse_where(args.where), max_fraction=args.max_fraction)
    _emit(args, fit.to_dict())
    return 0


def cmd_plot(args):
    _need(args, "csv")
    svg = emit_plot(PlotSpec(args.csv, args.x, args.y, args.group_by,
                             [b for b in args.bounds.split(",") if b], args.fit, args.title,
                             args.xlabel, args.ylabel, _parse_where(args.where)))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(svg)
    else:
        sys.stdout.write(svg)
    return 0


COMMANDS = dict(construct=cmd_construct, verify=cmd_verify, bounds=cmd_bounds, train=cmd_train,
                sweep=cmd_sweep, fit=cmd_fit, plot=cmd_plot)


# -- SVG --------------------------------------------------------------------------------

class PlotSpec:
    def __init__(self, csv_path, x_column="H", y_column="final_accuracy", group_by=None, bounds=(),
                 fit=None, title="", xlabel=None, ylabel=None, where=None):
        self.csv_path, self.x_column, self.y_column, self.group_by = csv_path, x_column, y_column, group_by
        self.bounds, self.fit, self.title = list(bounds), fit, title
        self.xlabel, self.ylabel, self.where = xlabel or x_column, ylabel or y_column, where


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
W, H_PX, M = 640, 420, 60


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _f(v):
    return f"{v:.2f}"


def emit_plot(spec):
    """Standalone SVG of grouped means with optional fit and bound curves.

    Output depends only on the CSV content and the spec, so identical inputs
    give byte-identical documents.
    """
    with open(spec.csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = rows[0].keys() if rows else []
    for c in (spec.x_column, spec.y_column, spec.group_by):
        if c and c not in cols:
            raise ConfigError(f"column {c!r} not in {spec.csv_path}")
    recs = read_sweep_csv(spec.csv_path) if set(SWEEP_COLUMNS) <= set(cols) else None
    if spec.where and recs is not None:
        keep = [spec.where(r) for r in recs]
        rows = [row for row, k in zip(rows, keep) if k]
    if not rows:
        raise ConfigError("no rows left after filtering")

    groups = {}
    for row in rows:
        g = row[spec.group_by] if spec.group_by else ""
        groups.setdefault(g, {}).setdefault(float(row[spec.x_column]), []).append(row)
    series = []
    for g in sorted(groups, key=_sort_key):
        pts = groups[g]
        xs = sorted(pts)
        ys = [float(np.mean([float(r[spec.y_column]) for r in pts[x]])) for x in xs]
        series.append((g, xs, ys, [pts[x][0] for x in xs]))

    curves = []
    for name in spec.bounds:
        if name not in ("ours", "previous", "chance"):
            raise ConfigError(f"unknown bound curve {name!r}")
        _, xs, _, reps = series[0]
        ys = []
        for r in reps:
            N, S, d, d_h, Hh = (int(float(r[k])) for k in ("N", "S", "d", "d_h", "H"))
            T0 = N ** S
            X = {"ours": Hh * d_h + d, "previous": Hh * (d_h - 1) + 1}.get(name, 0)
            ys.append(1.0 / N if name == "chance" else float(min(1.0, phi(X, N, T0))))
        curves.append((name, xs, ys))
    if spec.fit:
        for g, xs, ys, _ in series:
            if len(xs) >= 2:
                fit = polyfit_ls(xs, ys, spec.fit)
                fx = list(np.linspace(min(xs), max(xs), 50))
                curves.append((f"{spec.fit} fit {g}".strip() + f" (R2={fit.r_squared:.3f})", fx, list(fit.predict(fx))))

    all_x = [x for _, xs, _, _ in series for x in xs]
    all_y = [y for _, _, ys, _ in series for y in ys] + [y for _, _, ys in curves for y in ys]
    x0, x1 = min(all_x), max(all_x)
    y0, y1 = min(0.0, min(all_y)), max(all_y)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def px(x):
        return M + (x - x0) / (x1 - x0) * (W - 2 * M)

    def py(y):
        return H_PX - M - (y - y0) / (y1 - y0) * (H_PX - 2 * M)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H_PX}" viewBox="0 0 {W} {H_PX}">',
           f'<rect width="{W}" height="{H_PX}" fill="white"/>',
           f'<text x="{W // 2}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{_esc(spec.title)}</text>',
           f'<line x1="{M}" y1="{H_PX - M}" x2="{W - M}" y2="{H_PX - M}" stroke="black"/>',
           f'<line x1="{M}" y1="{M}" x2="{M}" y2="{H_PX - M}" stroke="black"/>']
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{_f(px(xv))}" y="{H_PX - M + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{xv:.4g}</text>')
        out.append(f'<text x="{M - 6}" y="{_f(py(yv) + 4)}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{yv:.3g}</text>')
    out.append(f'<text x="{W // 2}" y="{H_PX - 18}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="13">{_esc(spec.xlabel)}</text>')
    out.append(f'<text x="16" y="{H_PX // 2}" text-anchor="middle" font-family="sans-serif" font-size="13" '
               f'transform="rotate(-90 16 {H_PX // 2})">{_esc(spec.ylabel)}</text>')
    legend = []
    for i, (name, xs, ys) in enumerate(curves):
        color = "#555555" if name in ("ours", "previous", "chance") else PALETTE[i % len(PALETTE)]
        dash = {"ours": "6,3", "previous": "2,3", "chance": "1,4"}.get(name, "")
        pts = " ".join(f"{_f(px(x))},{_f(py(y))}" for x, y in zip(xs, ys))
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash_attr}/>')
        legend.append((name, color))
    for i, (g, xs, ys, _) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{_f(px(x))}" cy="{_f(py(y))}" r="3.5" fill="{color}"/>')
        legend.append((f"{spec.group_by}={g}" if spec.group_by else spec.y_column, color))
    for i, (name, color) in enumerate(legend):
        y = M + 14 * i
        out.append(f'<rect x="{W - M - 150}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{W - M - 136}" y="{y + 1}" font-family="sans-serif" font-size="11">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _sort_key(g):
    try:
        return (0, float(g), "")
    except ValueError:
        return (1, 0.0, g)


# -- entry point --------------------------------------------------------------------------

def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args = resolve(parser, args)
        _log_resolved(args)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        sys.stderr.write(f"aotmem {args.command}: {exc}\n")
        return 2
    except (FileNotFoundError, json.JSONDecodeError, ValueError) as exc:  # bad input
        sys.stderr.write(f"aotmem {args.command}: {exc}\n")
        return 2
    except Exception as exc:  # runtime failure
        sys.stderr.write(f"aotmem {args.command}: {type(exc).__name__}: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())

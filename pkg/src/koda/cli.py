"""Command-line entry point: ``koda <subcommand> [options]``.

Experiment options mirror the fields of ``ExperimentConfig`` (and of the
training config) one to one; ``--config file.json`` loads a full config and
any flag given on the command line overrides it. Exit status is 0 only when
every acceptance check of the run passes.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import typing
from dataclasses import MISSING, fields
from pathlib import Path

from . import data as D
from . import experiments as E
from . import model as M
from . import spectral as S
from . import training as TR

log = logging.getLogger("koda")

# experiment fields the CLI sets through dedicated options
_RESERVED = {"kind", "seeds", "train"}
_TRAIN_FIELDS = [f for f in fields(TR.TrainConfig) if f.name != "seed"]


def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_list(text):
    text = text.strip()
    if text.startswith("["):
        return json.loads(text)
    out = []
    for item in text.split(","):
        item = item.strip()
        try:
            out.append(float(item) if "." in item or "e" in item.lower() else int(item))
        except ValueError:
            out.append(item)
    return out


def _arg_type(f, hints):
    hint = hints.get(f.name, f.type)
    if hint is bool or (f.default is not MISSING and isinstance(f.default, bool)):
        return _parse_bool
    if hint is dict or (f.default_factory is not MISSING and isinstance(f.default_factory(), dict)):
        return json.loads
    if f.default_factory is not MISSING and isinstance(f.default_factory(), list):
        return _parse_list
    if f.name == "split_ratios":
        return _parse_list
    if isinstance(f.default, int):
        return int
    if isinstance(f.default, float):
        return float
    return str


def _add_field_options(parser, dc, skip=()):
    hints = typing.get_type_hints(dc)
    group = parser.add_argument_group(f"{dc.__name__} fields")
    for f in fields(dc):
        if f.name in skip:
            continue
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=_arg_type(f, hints),
                           default=None, metavar=f.name.upper())


def _experiment_parser(sub, name, help_text, seeded=True, checkpoint=False):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--preset", choices=E.PRESETS, help="start from named protocol settings")
    p.add_argument("--config", help="JSON file with ExperimentConfig fields")
    if seeded:
        p.add_argument("--seed", type=int, required=True, help="base seed (mandatory)")
        p.add_argument("--repeats", type=int, default=1, help="run seeds seed..seed+repeats-1")
    p.add_argument("--output-dir", default="results", help="where report files go")
    if checkpoint:
        p.add_argument("--checkpoint", help="evaluate this checkpoint instead of training")
    _add_field_options(p, E.ExperimentConfig, _RESERVED)
    _add_field_options(p, TR.TrainConfig, {"seed"})
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="koda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a benchmark system to CSV files")
    p.add_argument("--system", required=True, choices=sorted(D.VECTOR_FIELDS))
    p.add_argument("--trajectories", type=int, default=1)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--nlds", type=json.loads, default={}, help="JSON overrides of the system spec")
    p.add_argument("--output-dir", default="simulated")

    p = sub.add_parser("fit-filter", help="fit a spectral filter on a CSV training split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--tau", type=int, required=True)
    p.add_argument("--dominance-fraction", type=float, default=0.5)
    p.add_argument("--shared", action="store_true", help="one mask for all channels")
    p.add_argument("--split-ratios", type=_parse_list, default=None)
    p.add_argument("--output", required=True)

    p = _experiment_parser(sub, "train", "train a model and save a checkpoint")
    p.add_argument("--output", required=True, help="checkpoint path (.npz)")
    _experiment_parser(sub, "forecast", "open-loop test forecasts", checkpoint=True)
    _experiment_parser(sub, "assimilate", "forecasts corrected with measured windows", checkpoint=True)
    _experiment_parser(sub, "state-predict", "state prediction on a simulated system")

    p = sub.add_parser("report", help="summarize manifests, optionally re-deriving them")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--rerun", action="store_true", help="re-run each manifest and compare metrics bit for bit")
    p.add_argument("--output-dir", default="rerun")
    return parser


def experiment_config(args, kind):
    base = {}
    if getattr(args, "preset", None):
        over = {"dataset": args.dataset} if args.dataset else {}
        base = E.preset(args.preset, **over).to_dict()
    if args.config:
        base.update(json.loads(Path(args.config).read_text()))
    base["kind"] = kind
    for f in fields(E.ExperimentConfig):
        if f.name not in _RESERVED and getattr(args, f.name, None) is not None:
            base[f.name] = getattr(args, f.name)
    train = dict(base.get("train", {}))
    for f in _TRAIN_FIELDS:
        if getattr(args, f.name, None) is not None:
            train[f.name] = getattr(args, f.name)
    base["train"] = train
    if getattr(args, "seed", None) is not None:
        base["seeds"] = [args.seed + i for i in range(args.repeats)]
    return E.ExperimentConfig.from_dict(base)


def _print_report(rep):
    print(f"== {rep.name} ({rep.kind}, {rep.units} units)")
    for r in rep.mean_rows():
        print(f"  {r['dataset']} H={r['horizon']} alpha={r['alpha']:g} {r['variant']}: "
              f"mse={r['mse']:.6g} mae={r['mae']:.6g} (n={r['count']})")
    for c in rep.checks:
        print(f"  {'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")


def cmd_simulate(args):
    spec = D.default_spec(args.system, steps=args.steps, **args.nlds)
    trajs = D.simulate(spec, args.trajectories, args.seed)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(trajs):
        D.to_csv(t, out / f"{args.system}_{i:03d}.csv")
    (out / f"{args.system}_spec.json").write_text(json.dumps({"spec": spec.to_dict(), "seed": args.seed}, indent=1))
    print(f"wrote {len(trajs)} trajectories to {out}")
    return 0


def cmd_fit_filter(args):
    series = D.ingest_csv(args.dataset)
    ratios = tuple(args.split_ratios) if args.split_ratios else (
        D.ETT_RATIOS if Path(args.dataset).name.upper().startswith("ETT") else D.DEFAULT_RATIOS)
    train, _, _ = D.split(series, ratios)
    values = D.Scaler.fit(train.values).transform(train.values)
    filt = S.fit_filter(values, args.tau, args.dominance_fraction, per_channel=not args.shared)
    filt.save(args.output)
    print(f"kept {int(filt.keep_mask.sum())} of {filt.keep_mask.size} bins; wrote {args.output}")
    return 0


def cmd_train(args):
    cfg = experiment_config(args, "forecast")
    seed = cfg.seeds[0]
    prepared = E.prepare(cfg, seed)
    filt = E.fit_filter_for(cfg, prepared.filter_values)
    curve = []
    params = E.train_model(cfg, prepared, filt, seed, curve=curve)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    params.save(out)
    filt.save(out.with_suffix(".filter.json"))
    TR.write_curve(curve, out.with_suffix(".curve.csv"))
    print(f"wrote {out}, {out.with_suffix('.filter.json')} and {out.with_suffix('.curve.csv')}")
    return 0


def cmd_experiment(args, kind):
    cfg = experiment_config(args, kind)
    rep = E.run_experiment(cfg, getattr(args, "checkpoint", None))
    files = E.emit_report([rep], args.output_dir)
    _print_report(rep)
    print("wrote " + ", ".join(str(f) for f in files))
    return 0 if rep.passed else 1


def cmd_report(args):
    status = 0
    for path in args.manifests:
        manifest = json.loads(Path(path).read_text())
        metrics_path = Path(path).parent / manifest["metrics_file"]
        print(f"== {manifest['name']} ({manifest['kind']}), config {manifest['config_hash']}, build {manifest['build']}")
        with open(metrics_path) as fh:
            rows = [r for r in csv.DictReader(l for l in fh if not l.startswith("#"))]
        for r in rows:
            if r["seed"] == "mean":
                print(f"  {r['dataset']} H={r['horizon']} alpha={r['alpha']} {r['variant']}: mse={r['mse']} mae={r['mae']}")
        for c in manifest["checks"]:
            print(f"  {'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['detail']}")
            status |= 0 if c["passed"] else 1
        if args.rerun:
            rep = E.rerun_manifest(path, args.output_dir)
            fresh = E.report_paths(rep, args.output_dir)["metrics"]
            same = fresh.read_bytes() == metrics_path.read_bytes()
            print(f"  rerun metrics {'identical' if same else 'DIFFER'} ({fresh})")
            status |= 0 if same else 1
    return status


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "simulate": cmd_simulate, "fit-filter": cmd_fit_filter, "train": cmd_train,
        "forecast": lambda a: cmd_experiment(a, "forecast"),
        "assimilate": lambda a: cmd_experiment(a, "assimilation"),
        "state-predict": lambda a: cmd_experiment(a, "state"),
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, OSError, D.SimulationError, M.RolloutError, TR.TrainingError) as exc:
        print(f"koda {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``poisonlab {gen-trigger,run,grid,plot,make-fixture}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import PoisonLabError

log = logging.getLogger("poisonlab")


def _cmd_gen_trigger(args) -> int:
    from .experiments import ExperimentConfig, encoder_for, parse_number, resources_for
    from .data import sample_accessible_set
    from .encoder import build_prompts
    from .optim import (PerturbationBudget, optimize_clip_cfa, optimize_clip_uap,
                        optimize_proxy_uap, save_noise_map)
    from .triggers import make_badnets_trigger, make_blended_trigger, save_trigger
    from .victim import train_victim

    overrides = {"trigger.method": args.method, "scenario.target": args.target,
                 "encoder.adapter": args.encoder, "seeds": [args.seed]}
    if args.encoder_weights:
        overrides["encoder.weights"] = args.encoder_weights
    if args.p is not None:
        overrides["scenario.p"] = args.p
    if args.victim_epochs is not None:
        overrides.update({"victim.epochs": args.victim_epochs, "victim.lr_drop_epochs": []})
    cfg = ExperimentConfig(overrides)
    res = resources_for(cfg)
    if args.method == "badnets":
        path = save_trigger(make_badnets_trigger(res.train.image_shape), args.out)
    elif args.method == "blended":
        path = save_trigger(make_blended_trigger(image_shape=res.train.image_shape), args.out)
    elif args.method == "uap":
        budget = PerturbationBudget(epsilon=float(parse_number(args.epsilon)),
                                    alpha=float(parse_number(args.alpha)), steps=args.steps)
        proxy = train_victim(res.train, None, cfg.victim_config(args.seed))
        path = save_noise_map(optimize_proxy_uap(proxy, res.train, args.target, budget), args.out)
    elif args.method in ("clip-uap", "clip-cfa"):
        budget = PerturbationBudget(epsilon=float(parse_number(args.epsilon)),
                                    alpha=float(parse_number(args.alpha)), steps=args.steps)
        accessible = sample_accessible_set(res.train, res.external,
                                           cfg.scenario(len(res.train), args.seed))
        enc = encoder_for(cfg)
        if args.method == "clip-uap":
            noise = optimize_clip_uap(enc, build_prompts(res.train.class_names, enc), accessible,
                                      args.target, budget)
        else:
            noise = optimize_clip_cfa(enc, accessible, budget, pairing_seed=args.seed)
        path = save_noise_map(noise, args.out)
    print(path)
    return 0


def _cmd_run(args) -> int:
    from .experiments import load_config, run_experiment

    cfg = load_config(args.config)
    if args.output_dir:
        cfg = cfg.with_(output_dir=args.output_dir)
    report = run_experiment(cfg)
    print(json.dumps(report.aggregate, indent=2, sort_keys=True))
    print(report.artifacts["report"])
    return 0 if report.aggregate["n_failed"] == 0 else 1


def _cmd_grid(args) -> int:
    from .experiments import ExperimentConfig, emit_plots, load_config, run_grid

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.output_dir:
        cfg = cfg.with_(output_dir=args.output_dir)
    values = [v for v in args.values.split(",") if v.strip()]
    reports = run_grid(cfg, args.axis, values)
    for rep in reports:
        print(f"{args.axis}={rep.grid['value']:.6g} asr={rep.aggregate['asr_mean']} "
              f"ba={rep.aggregate['ba_mean']}")
    if args.plot_dir:
        for p in emit_plots(reports, args.plot_dir):
            print(p)
    return 0


def _cmd_plot(args) -> int:
    from .experiments import emit_plots, load_reports

    out = args.out or Path(args.input) / "plots"
    for p in emit_plots(load_reports(args.input), out):
        print(p)
    return 0


def _cmd_make_fixture(args) -> int:
    from .data import save_folder, save_packed
    from .desk import make_desk_fixture

    fx = make_desk_fixture(args.seed)
    out = Path(args.out)
    save = save_packed if args.format == "packed" else save_folder
    for name, ds in (("train", fx.train), ("test", fx.test), ("external", fx.external)):
        target = out / (f"{name}.bin" if args.format == "packed" else name)
        print(save(ds, target))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="poisonlab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trigger", help="build one trigger on the desk fixture")
    g.add_argument("--victim-epochs", type=int, default=None,
                   help="proxy training epochs for --method uap")
    g.add_argument("--method", required=True,
                   choices=["badnets", "blended", "uap", "clip-uap", "clip-cfa"])
    g.add_argument("--epsilon", default="8/255")
    g.add_argument("--alpha", default="2/255")
    g.add_argument("--steps", type=int, default=50)
    g.add_argument("--target", type=int, default=0)
    g.add_argument("--p", type=int, default=None, help="accessible-set size")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--encoder", default="desk", choices=["desk", "toy", "projection", "clip"])
    g.add_argument("--encoder-weights", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen_trigger)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--output-dir", default=None)
    r.set_defaults(fn=_cmd_run)

    gr = sub.add_parser("grid", help="sweep one axis of a config")
    gr.add_argument("--config", default=None, help="base config (default: desk defaults)")
    gr.add_argument("--axis", required=True,
                    choices=["poison_rate", "class_count", "domain_rate", "epsilon"])
    gr.add_argument("--values", required=True, help="comma separated, fractions allowed")
    gr.add_argument("--output-dir", default=None)
    gr.add_argument("--plot-dir", default=None)
    gr.set_defaults(fn=_cmd_grid)

    p = sub.add_parser("plot", help="plot every report.json under a run directory")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", default=None, help="default: <in>/plots")
    p.set_defaults(fn=_cmd_plot)

    f = sub.add_parser("make-fixture", help="write the desk fixture to disk")
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--format", choices=["folder", "packed"], default="packed")
    f.set_defaults(fn=_cmd_make_fixture)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (PoisonLabError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

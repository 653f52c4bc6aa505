"""Command-line entry point: ``flowmaps gen-data | train | eval | sample``.

Exit codes are 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error. Every output directory receives ``config.resolved.json``
and ``versions.txt``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CapacityError, ConfigurationError, DomainError, FlowMapsError, FormatError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Run-directory bookkeeping
# --------------------------------------------------------------------------


def versions_text() -> str:
    from . import autograd, checkpoint, sim, train

    lines = [
        f"flowmaps {__version__}",
        f"flowsim-jsonl {sim.FORMAT_VERSION}",
        f"checkpoint {checkpoint.VERSION}",
        f"metrics-csv {','.join(train.METRICS_HEADER)}",
        f"numpy {np.__version__}",
        f"kernels {autograd.kernel_backend()}",
    ]
    return "\n".join(lines) + "\n"


def write_run_files(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "versions.txt").write_text(versions_text(), encoding="utf-8")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _parse_sets(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .sim import EnvConfig, TransitionModel, dataset_stats, make_dataset, write_episodes

    if args.episodes < 0:
        raise UsageError("--episodes must be >= 0")
    if args.tau_max < 1:
        raise UsageError("--tau-max must be >= 1")
    out = Path(args.out)
    transition = TransitionModel()
    env = EnvConfig()
    resolved = {
        "subcommand": "gen-data",
        "seed": args.seed,
        "episodes": args.episodes,
        "tau_max": args.tau_max,
        "transition": {"p_advance": transition.p_advance, "p_stay": transition.p_stay, "p_skip": transition.p_skip},
        "environment": env.to_dict(),
    }
    episodes = make_dataset(args.seed, args.episodes, args.tau_max, transition, env)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_episodes(episodes, out, {k: v for k, v in resolved.items() if k != "subcommand"})
    stats_path = out.with_name(out.name + ".stats.json")
    stats_path.write_text(json.dumps(dataset_stats(episodes, transition), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_run_files(out.parent, resolved)
    print(f"wrote {len(episodes)} episodes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .sim import DEFAULT_PALETTE, read_episodes
    from .train import TrainConfig, train

    if args.resume:
        raise UsageError("resuming a run is not supported; start a fresh run in a new --out directory")
    data = _existing(args.data, "training data")
    val = _existing(args.val, "validation data")
    out = Path(args.out)
    if (out / "checkpoint.fmap").exists():
        raise UsageError(f"{out} already holds a checkpoint; resuming is not supported, choose a new --out")

    values = {}
    if args.config:
        values.update(TrainConfig.from_file(_existing(args.config, "config file")).to_dict())
    values.update(_parse_sets(args.set))
    for key in ("iterations", "seed", "batch_size", "lr"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    if args.baseline:
        values["model_kind"] = "mlp_baseline"
    config = TrainConfig.from_mapping(values)
    config.validate()

    train_eps, val_eps = read_episodes(data), read_episodes(val)
    if not train_eps or not val_eps:
        raise UsageError("training and validation files must contain at least one episode")
    write_run_files(out, {"subcommand": "train", "data": str(data), "val": str(val), "train": config.to_dict()})

    def progress(row):
        if not args.quiet and row["val_loss"] is not None:
            print(f"step {row['step']:>6d}  lr {row['lr']:.3e}  val_loss {row['val_loss']:.5f}", flush=True)

    result = train(config, train_eps, val_eps, out, list(DEFAULT_PALETTE), progress)
    print(f"checkpoint {result.checkpoint_path} ({result.seconds:.1f}s)")
    return EXIT_OK


def _model_names(paths, cfgs) -> list[str]:
    names = [c["model_kind"] for c in cfgs]
    if len(set(names)) == len(names):
        return names
    return [f"{n}:{Path(p).parent.name or Path(p).stem}" for n, p in zip(names, paths)]


def cmd_eval(args) -> int:
    from .evaluate import EvalConfig, evaluate_models
    from .sim import read_episodes
    from .train import load_model

    paths = [_existing(p, "checkpoint") for p in args.checkpoint]
    data = _existing(args.data, "evaluation data")
    loaded = [load_model(p) for p in paths]
    names = _model_names(paths, [c for _, c in loaded])
    kw = {
        "delta_taus": tuple(args.delta_taus),
        "queries_per_cell": args.queries_per_cell,
        "n_samples": args.n,
        "coverage_samples": args.coverage_samples,
        "steps": args.steps,
        "seed": args.seed,
    }
    if args.n < 1 or args.queries_per_cell < 1 or args.steps < 1:
        raise UsageError("--n, --queries-per-cell and --steps must be >= 1")
    config = EvalConfig(**kw)
    episodes = read_episodes(data)
    if not episodes:
        raise UsageError(f"{data} holds no episodes")
    out = Path(args.out)
    write_run_files(out, {"subcommand": "eval", "checkpoints": [str(p) for p in paths], "data": str(data),
                          "models": names, "eval": config.to_dict()})  # fmt: skip
    report = evaluate_models(dict(zip(names, [m for m, _ in loaded])), episodes, config)
    report.write(out)
    for name, summary in report.models.items():
        print(f"{name}: mean KL {summary['kl_mean']:.4f}, "
              f"delta_tau=1 >=2-mode coverage {summary['delta_tau_1_coverage_at_least_two']:.3f}")  # fmt: skip
    return EXIT_OK


def cmd_sample(args) -> int:
    from .evaluate import QuerySpec, postprocess_boxes, sample_posterior
    from .render import render_heatmap
    from .sim import generate_environment, read_episodes
    from .train import load_model

    path = _existing(args.checkpoint, "checkpoint")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    model, cfg = load_model(path)
    if args.data:
        episodes = read_episodes(_existing(args.data, "episode data"))
        if not 0 <= args.episode < len(episodes):
            raise UsageError(f"--episode must lie in [0, {len(episodes)})")
        ep = episodes[args.episode]
        if not 0 <= args.tau <= ep.tau_max:
            raise UsageError(f"--tau must lie in [0, {ep.tau_max}]")
        snapshot = ep.snapshots[args.tau]
    else:
        snapshot = generate_environment(args.seed).snapshot(args.tau)
    valid = [o.obj_class.name for o in snapshot.objects]
    if args.query_class not in valid:
        raise UsageError(f"unknown class {args.query_class!r}; valid classes: {', '.join(valid)}")
    tau_max = cfg["model"]["tau_max"]
    if args.delta_tau < 0 or snapshot.tau + args.delta_tau > tau_max:
        raise UsageError(f"--delta-tau must keep tau + delta_tau within [0, {tau_max}]")

    query = QuerySpec.from_snapshot(snapshot, args.query_class, args.delta_tau)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([args.seed, 0x5A5])))
    raw, ok = sample_posterior(model, [query], args.n, args.steps, rng)
    boxes = postprocess_boxes(raw[0][ok[0]])
    out = Path(args.out)
    resolved = {"subcommand": "sample", "checkpoint": str(path), "data": args.data, "episode": args.episode,
                "tau": snapshot.tau, "query_class": args.query_class, "delta_tau": args.delta_tau, "n": args.n,
                "steps": args.steps, "seed": args.seed, "render": bool(args.render)}  # fmt: skip
    write_run_files(out, resolved)
    payload = {"query_class": args.query_class, "tau": snapshot.tau, "delta_tau": args.delta_tau,
               "dropped": int((~ok[0]).sum()), "boxes": np.round(boxes, 9).tolist()}  # fmt: skip
    (out / "samples.json").write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    if args.render:
        img = render_heatmap(boxes, snapshot, out / "heatmap.ppm")
        print(f"rendered {img}")
    print(f"wrote {len(boxes)} samples to {out / 'samples.json'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowmaps", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"flowmaps {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a JSONL episode file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--episodes", type=int, default=2000)
    g.add_argument("--tau-max", type=int, default=20)
    g.add_argument("--out", required=True, help="output .jsonl path")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train FlowMaps or the MLP baseline")
    t.add_argument("--config", help="JSON or key=value file")
    t.add_argument("--data", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--baseline", action="store_true", help="train the MLP baseline")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any training option")
    t.add_argument("--resume", action="store_true", help=argparse.SUPPRESS)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="KL and mode-coverage report for one or more checkpoints")
    e.add_argument("--checkpoint", action="append", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--delta-taus", type=int, nargs="+", default=[1, 2, 3, 5, 10])
    e.add_argument("--queries-per-cell", type=int, default=200)
    e.add_argument("--n", type=int, default=25)
    e.add_argument("--coverage-samples", type=int, default=0)
    e.add_argument("--steps", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="draw posterior samples for one query")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--query-class", required=True)
    s.add_argument("--delta-tau", type=int, required=True)
    s.add_argument("--n", type=int, default=25)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--data", help="episode file; the default environment is used when omitted")
    s.add_argument("--episode", type=int, default=0)
    s.add_argument("--tau", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="samples")
    s.add_argument("--render", action="store_true", help="also write heatmap.ppm")
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"flowmaps {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, CapacityError, FormatError, FlowMapsError, OSError) as exc:
        print(f"flowmaps {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``aofl {synth,train,eval,angles,ablate,inspect}``.

Exit codes: 0 success, 1 usage, 2 data/format error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import ablation, dataio, model
from .train import (DivergenceError, TrainConfig, angle_report, evaluate, format_table, train,
                    write_csv)

log = logging.getLogger("aofl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig keys")
    g = p.add_argument_group("config overrides (take precedence over --config)")
    for f in dataclasses.fields(TrainConfig):
        kw = {"dest": f"cfg_{f.name}", "default": None, "metavar": f.name.upper()}
        if f.type in ("bool", bool):
            kw.pop("metavar")
            g.add_argument(_flag(f.name), action=argparse.BooleanOptionalAction, **kw)
        elif f.name == "split_ratios":
            kw["metavar"] = ("TRAIN", "VALID", "TEST")
            g.add_argument(_flag(f.name), type=float, nargs=3, **kw)
        elif "float" in str(f.type):
            g.add_argument(_flag(f.name), type=float, **kw)
        elif "int" in str(f.type):
            g.add_argument(_flag(f.name), type=int, **kw)
        else:
            g.add_argument(_flag(f.name), **kw)


def resolve_config(args, base: dict | None = None) -> TrainConfig:
    data = dict(base or {})
    if getattr(args, "config", None):
        try:
            data.update(json.loads(Path(args.config).read_text()))
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {args.config} is not valid JSON: {e}") from None
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            data[f.name] = v
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _select(dataset, cfg: TrainConfig, which: str):
    if which == "all":
        return dataset
    tr, va, te = dataio.split(dataset, cfg.split_ratios, cfg.seed)
    return {"train": tr, "valid": va, "test": te}[which]


def _check_compatible(params: model.ModelParams, dataset, ckpt, data_dir) -> None:
    if (params.dims.d, params.dims.num_classes) != (dataset.d, dataset.num_classes):
        raise dataio.DatasetError(
            f"checkpoint {ckpt} has d={params.dims.d}, num_classes={params.dims.num_classes} but dataset "
            f"{data_dir} has d={dataset.d}, num_classes={dataset.num_classes}")


def _checkpoint_config(args, ckpt: Path) -> TrainConfig:
    snapshot = ckpt.parent / "resolved_config.json"
    base = json.loads(snapshot.read_text()) if snapshot.is_file() and not args.config else None
    return resolve_config(args, base)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        spec = dataio.SynthSpec(
            num_conversations=args.num_conversations, utterances_per_conversation=args.utterances_per_conversation,
            d=args.d, num_classes=args.num_classes, shared_strength=args.shared_strength,
            specific_strength=args.specific_strength, noise_std=args.noise_std, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    ds = dataio.synth_generate(spec)
    out = Path(args.out)
    dataio.write_dataset(ds, out)
    _write_json(out / "synth_spec.json", dataclasses.asdict(spec))
    counts = [int((ds.labels() == c).sum()) for c in range(ds.num_classes)]
    print(f"wrote {len(ds)} conversations / {ds.num_utterances} utterances, d={ds.d}, "
          f"{ds.num_classes} classes to {out}")
    print("class balance: " + ", ".join(f"{n}={c}" for n, c in zip(ds.class_names, counts)))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    dataset = dataio.load_dataset(args.data)
    try:
        cfg.dims(dataset)
        tr, va, te = dataio.split(dataset, cfg.split_ratios, cfg.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    start = time.perf_counter()

    def progress(rec, _):
        log.info("epoch %3d%s total=%.4f ce=%.4f valid_acc=%.4f valid_wf1=%.4f", rec.epoch,
                 " (warm-up)" if rec.warmup else "", rec.total, rec.ce, rec.valid_accuracy, rec.valid_weighted_f1)

    params, history = train(cfg, tr, va, on_epoch=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(params, out / "checkpoint.aofl")
    write_csv(out / "history.csv", history.rows())
    (out / "history.txt").write_text(format_table(history.rows()))
    _write_json(out / "resolved_config.json", cfg.to_dict())
    report = evaluate(params, te, cfg)
    _write_json(out / "test_report.json", report.to_dict())
    print(f"trained {cfg.epochs} epochs in {time.perf_counter() - start:.1f}s "
          f"(best epoch {history.best_epoch}); test accuracy {report.accuracy:.4f}, "
          f"weighted F1 {report.weighted_f1:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt)
    params = model.load_checkpoint(ckpt)
    dataset = dataio.load_dataset(args.data)
    _check_compatible(params, dataset, ckpt, args.data)
    report = evaluate(params, _select(dataset, cfg, args.split), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.to_dict())
    rows = report.summary_rows()
    write_csv(out / "report.csv", rows)
    (out / "report.txt").write_text(format_table(rows))
    _write_json(out / "resolved_config.json", cfg.to_dict())
    print(f"{args.split}: accuracy {report.accuracy:.4f}, weighted F1 {report.weighted_f1:.4f}")
    return EXIT_OK


def cmd_angles(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = _checkpoint_config(args, ckpt)
    params = model.load_checkpoint(ckpt)
    dataset = dataio.load_dataset(args.data)
    _check_compatible(params, dataset, ckpt, args.data)
    rep = angle_report(params, _select(dataset, cfg, args.split))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "angles.csv", rep.rows)
    write_csv(out / "projection.csv", rep.projection)
    _write_json(out / "resolved_config.json", cfg.to_dict())
    ok = sum(r["csr_ok"] for r in rep.rows)
    print(f"{len(rep.rows)} utterances, {ok} satisfy the ranking constraint in every modality, "
          f"{rep.degenerate_rows} degenerate; explained variance of 2-D projection "
          f"{rep.explained_variance[0]:.3f}, {rep.explained_variance[1]:.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    dataset = dataio.load_dataset(args.data)
    try:
        cfg.dims(dataset)
        tr, va, te = dataio.split(dataset, cfg.split_ratios, cfg.seed)
        variants = args.variants.split(",") if args.variants else None
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError as e:
        raise UsageError(str(e)) from None
    try:
        result = ablation.run_ablation(cfg, tr, va, te, variants, seeds, args.threads)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation_runs.csv", [r.row() for r in result.runs])
    summary = result.summary()
    write_csv(out / "ablation_summary.csv", summary)
    cols = ["variant", "runs", "failures", "accuracy_mean", "accuracy_std", "weighted_f1_mean", "weighted_f1_std",
            "cos_phi_mean_mean", "csr_satisfaction_mean", "theta_std_deg_mean", "mean_abs_cos_theta_mean"]
    table = format_table(summary, cols)
    (out / "ablation_summary.txt").write_text(table)
    _write_json(out / "resolved_config.json", {**cfg.to_dict(), "ablation_seeds": seeds,
                                               "ablation_variants": result.variants})
    print(table, end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = Path(args.checkpoint)
    version, dims = model.read_checkpoint_header(ckpt)
    params = model.load_checkpoint(ckpt)
    print(f"checkpoint {ckpt}")
    print(f"  format version {version}")
    for f in dataclasses.fields(dims):
        print(f"  {f.name:<12}{getattr(dims, f.name)}")
    print(f"  parameters  {params.count()} (closed form {model.param_count(dims)})")
    groups: dict[str, int] = {}
    for name, t in params.named():
        key = ".".join(name.split(".")[:2]) if name.startswith(("specific", "context")) else name.split(".")[0]
        groups[key] = groups.get(key, 0) + t.data.size
    for k, n in groups.items():
        print(f"    {k:<14}{n}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aofl", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _sub = sub.add_parser
    sub.add_parser = lambda *a, **k: _sub(*a, parents=[common], **k)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    defaults = dataio.SynthSpec()
    for f in dataclasses.fields(dataio.SynthSpec):
        s.add_argument(_flag(f.name), type=type(getattr(defaults, f.name)), default=getattr(defaults, f.name))
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("angles", cmd_angles, "export per-utterance angles and a 2-D projection")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True, type=Path)
        e.add_argument("--data", required=True, type=Path)
        e.add_argument("--split", choices=("train", "valid", "test", "all"), default="test")
        e.add_argument("--out", required=True, type=Path)
        _add_config_flags(e)
        e.set_defaults(func=func)

    a = sub.add_parser("ablate", help="run the ablation grid")
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--variants", help=f"comma-separated subset of: {', '.join(ablation.VARIANTS)}")
    a.add_argument("--seeds", default=",".join(map(str, ablation.DEFAULT_SEEDS)))
    a.add_argument("--threads", type=int, help="worker processes (default: $AOFL_THREADS or 1)")
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect", help="print checkpoint metadata")
    i.add_argument("--checkpoint", required=True, type=Path)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"aofl: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (dataio.DatasetError, model.CheckpointError, FileNotFoundError) as e:
        print(f"aofl: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"aofl: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

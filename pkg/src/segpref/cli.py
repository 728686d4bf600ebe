"""Command-line entry point: gen-data, train, align, eval, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from . import segmenter as seg
from . import synthdata as sd
from . import trainer as tr

log = logging.getLogger("segpref")

OUT_ENV = "SEGPREF_OUT"


class CliError(Exception):
    """A one-line, user-facing failure."""


def default_out(sub: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / sub


# ---------------------------------------------------------------- config flags


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config")
    g.add_argument("--preset", choices=sorted(tr.PRESETS), default="desk",
                   help="starting values before individual flags are applied (default: desk)")
    g.add_argument("--config", type=Path, help="JSON config file (a run's config.json); flags override it")
    g.add_argument("--seed", type=int)
    g.add_argument("--annotated-fraction", type=float)
    g.add_argument("--unannotated-fraction", type=float)
    g.add_argument("--epochs-stage1", type=int)
    g.add_argument("--epochs-stage2", type=int)
    g.add_argument("--lr", dest="initial_lr", type=float)
    g.add_argument("--lr-stage2", type=float)
    g.add_argument("--lr-halving-period", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--strategy", choices=tr.STRATEGIES)
    g.add_argument("--beta", type=float)
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--flip-fraction", type=float)
    g.add_argument("--fixed-candidates", action="store_true", help="rate stage-1 candidates once instead of every epoch")
    g.add_argument("--sdc-tolerance", type=float)


CONFIG_FLAGS = ("seed", "annotated_fraction", "unannotated_fraction", "epochs_stage1", "epochs_stage2", "initial_lr",
                "lr_stage2", "lr_halving_period", "batch_size", "strategy", "flip_fraction", "sdc_tolerance")


def config_from_args(args) -> tr.TrainConfig:
    if args.config is not None:
        if not args.config.is_file():
            raise CliError(f"--config: no such file {args.config}")
        cfg = tr.config_from_dict(json.loads(args.config.read_text()))
    else:
        cfg = tr.preset(args.preset)
    changes = {k: getattr(args, k) for k in CONFIG_FLAGS if getattr(args, k) is not None}
    dpo = {k: getattr(args, k) for k in ("beta", "beta1", "beta2") if getattr(args, k) is not None}
    try:
        if dpo:
            changes["dpo"] = replace(cfg.dpo, **dpo)
        if args.fixed_candidates:
            changes["regenerate_candidates"] = False
        return replace(cfg, **changes)
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}") from exc


def run_header(cfg: tr.TrainConfig, **extra) -> dict:
    header = {"config_hash": cfg.hash(), "config": json.dumps(cfg.to_dict(), sort_keys=True)}
    header.update({k: str(v) for k, v in extra.items()})
    return header


def write_report(path: Path, report, cfg: tr.TrainConfig, **extra) -> None:
    report.header.update(run_header(cfg, **extra))
    path.write_text(report.to_csv())


def load_data(path: Path):
    try:
        return sd.load_dataset(path)
    except sd.DatasetError as exc:
        raise CliError(f"dataset {path}: {exc}") from exc


def load_policy(path: Path):
    try:
        return seg.load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"missing checkpoint: {path}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"bad checkpoint {path}: {exc}") from exc


def load_state(path):
    if path is None:
        return None
    try:
        return tr.OptimizerState.load(path)
    except FileNotFoundError:
        raise CliError(f"missing optimizer state: {path}") from None


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    fr = args.fractions
    if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise CliError(f"--fractions must be three non-negative numbers summing to 1, got {fr}")
    try:
        m = sd.generate_dataset(args.out, seed=args.seed, n=args.n, size=args.size, class_count=args.classes,
                                split_fractions=tuple(fr), blur_radius=args.blur, noise_level=args.noise)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    print(f"wrote {m.n} samples to {args.out} splits={m.split_counts} hash={sd.corpus_hash(args.out)}")
    return 0


def _write_config(out: Path, cfg: tr.TrainConfig, data: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "data.txt").write_text(f"{data}\n")


def _stage2(args, cfg, ds, pi_fine, out: Path) -> None:
    _, un = tr.select_training(ds, cfg)
    init = load_policy(args.init) if getattr(args, "init", None) else None
    state = load_state(getattr(args, "optimizer_state", None))
    audit = []
    psi, trace, state = tr.align_stage2(pi_fine, cfg, un, val_samples=None, init=init, state=state,
                                        start_epoch=getattr(args, "start_epoch", 0), audit=audit)
    seg.save_checkpoint(out / "psi.ckpt", psi, extra={"config_hash": cfg.hash(), "stage": 2})
    state.save(out / "psi.opt")
    trace.write_csv(out / "stage2_log.csv", run_header(cfg))
    if args.audit:
        from .annotator import write_audit

        path = out / "annotator_audit.csv"
        path.unlink(missing_ok=True)
        write_audit(path, [(sid, cs) for _, sid, cs in audit])
    rep = tr.evaluate(psi, ds.split("test"), cfg)
    write_report(out / "report_stage2.csv", rep, cfg, policy="psi", split="test")
    print(f"stage2: test dice {rep.mean_dice:.4f} iou {rep.mean_iou:.4f} sdc {rep.mean_sdc:.4f}")


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    ds = load_data(args.data)
    out = args.out or default_out(f"train-{cfg.hash()}")
    _write_config(out, cfg, args.data)
    try:
        ann, _ = tr.select_training(ds, cfg)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    init = load_policy(args.init) if args.init else None
    state = load_state(args.optimizer_state)
    pi_fine, trace, state = tr.train_stage1(cfg, ann, init=init, state=state, start_epoch=args.start_epoch)
    seg.save_checkpoint(out / "pi_fine.ckpt", pi_fine, extra={"config_hash": cfg.hash(), "stage": 1})
    state.save(out / "pi_fine.opt")
    trace.write_csv(out / "stage1_log.csv", run_header(cfg))
    rep = tr.evaluate(pi_fine, ds.split("test"), cfg)
    write_report(out / "report_stage1.csv", rep, cfg, policy="pi_fine", split="test")
    print(f"stage1: test dice {rep.mean_dice:.4f} iou {rep.mean_iou:.4f} sdc {rep.mean_sdc:.4f}")
    if args.align:
        args.init, args.optimizer_state, args.start_epoch = None, None, 0
        _stage2(args, cfg, ds, pi_fine, out)
    print(f"outputs in {out}")
    return 0


def cmd_align(args) -> int:
    cfg = config_from_args(args)
    ds = load_data(args.data)
    pi_fine = load_policy(args.checkpoint)
    out = args.out or default_out(f"align-{cfg.hash()}")
    _write_config(out, cfg, args.data)
    try:
        _stage2(args, cfg, ds, pi_fine, out)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = config_from_args(args)
    ds = load_data(args.data)
    samples = ds.split(args.split)
    if not samples:
        raise CliError(f"split {args.split!r} is empty")
    if args.oracle:
        policy, name = tr.OraclePolicy(), "oracle"
    elif args.checkpoint is None:
        raise CliError("eval needs --checkpoint (or --oracle)")
    else:
        policy, name = load_policy(args.checkpoint), str(args.checkpoint)
    rep = tr.evaluate(policy, samples, cfg)
    rep.header.update(run_header(cfg, policy=name, split=args.split))
    text = rep.to_csv()
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
        print(f"dice {rep.mean_dice:.4f} iou {rep.mean_iou:.4f} sdc {rep.mean_sdc:.4f} -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    try:
        spec = ex.load_spec(args.spec, base)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc
    ds = load_data(args.data)
    out = args.out or default_out(f"ablate-{spec.name}")
    results, text = ex.run_experiment(spec, ds, out, jobs=args.jobs)
    failed = sum(r.status != "ok" for r in results)
    print(text, end="")
    print(f"{len(results)} runs ({failed} failed) -> {out / (spec.name + '.csv')}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segpref", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--n", type=int, default=625)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--fractions", type=float, nargs=3, default=[0.08, 0.72, 0.20],
                   metavar=("ANNOTATED", "UNANNOTATED", "TEST"))
    g.add_argument("--blur", type=float, default=2.0)
    g.add_argument("--noise", type=float, default=0.3)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="stage-1 fine-tuning, optionally followed by alignment")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path)
    t.add_argument("--align", action="store_true", help="run stage 2 after stage 1")
    t.add_argument("--audit", action="store_true", help="write the annotator audit CSV")
    t.add_argument("--init", type=Path, help="resume stage 1 from this checkpoint")
    t.add_argument("--optimizer-state", type=Path)
    t.add_argument("--start-epoch", type=int, default=0)
    t.set_defaults(func=cmd_train)
    add_config_flags(t)

    a = sub.add_parser("align", help="stage-2 alignment of an existing stage-1 checkpoint")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--checkpoint", type=Path, required=True, help="stage-1 (reference) checkpoint")
    a.add_argument("--out", type=Path)
    a.add_argument("--audit", action="store_true")
    a.add_argument("--init", type=Path, help="resume from a stage-2 checkpoint")
    a.add_argument("--optimizer-state", type=Path)
    a.add_argument("--start-epoch", type=int, default=0)
    a.set_defaults(func=cmd_align)
    add_config_flags(a)

    e = sub.add_parser("eval", help="score a checkpoint on one split")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--split", choices=sd.SPLITS, default="test")
    e.add_argument("--oracle", action="store_true", help="score ground-truth maps instead of a model")
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_eval)
    add_config_flags(e)

    b = sub.add_parser("ablate", help="run an experiment spec file")
    b.add_argument("spec", type=Path)
    b.add_argument("--data", type=Path, required=True)
    b.add_argument("--out", type=Path)
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=cmd_ablate)
    add_config_flags(b)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"segpref {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (sd.DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"segpref {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

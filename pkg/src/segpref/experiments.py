"""Ablation harness: grid specs, cached stage-1 runs, per-run and aggregate CSV tables.

A spec file is plain text, one ``key = value`` per line::

    name = strategies
    seeds = 0 1 2 3 4
    set initial_lr = 3e-4
    grid strategy = best | rating | ranking
    grid dpo.beta1, dpo.beta2 = 2, 1 | 1.5, 0.75 | 1, 0.5

``set`` lines override the base config, ``grid`` lines add an axis (several
keys on one line vary together) and the grid is the product of all axes.
The pseudo-key ``align`` (true/false) switches stage 2 on or off.
"""

from __future__ import annotations

import ast
import csv
import dataclasses
import hashlib
import io
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import segmenter as seg
from . import synthdata as sd
from . import trainer as tr
from .trainer import TrainConfig

log = logging.getLogger(__name__)

PSEUDO_KEYS = ("align",)
# fields that do not influence stage 1; runs differing only here share one stage-1 model
STAGE2_FIELDS = ("unannotated_fraction", "epochs_stage2", "lr_stage2", "strategy", "dpo", "flip_fraction",
                 "regenerate_candidates", "thresholds")
METRICS = ("iou", "dice", "mdice", "msdc")


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    name: str
    base: TrainConfig = field(default_factory=TrainConfig)
    axes: list[tuple[tuple[str, ...], list[tuple]]] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: Path | None = None
    align: bool = True

    def __post_init__(self):
        if not self.axes:
            raise SpecError(f"experiment {self.name!r}: grid is empty")
        if not self.seeds:
            raise SpecError(f"experiment {self.name!r}: no seeds")
        for keys, values in self.axes:
            for k in keys:
                check_key(k)
            if not values:
                raise SpecError(f"grid axis {','.join(keys)} has no values")
            for v in values:
                if len(v) != len(keys):
                    raise SpecError(f"grid axis {','.join(keys)}: value {v} does not match {len(keys)} keys")

    def points(self) -> list[dict]:
        combos = itertools.product(*[[dict(zip(keys, v)) for v in values] for keys, values in self.axes])
        out = []
        for combo in combos:
            merged = {}
            for part in combo:
                merged.update(part)
            out.append(merged)
        return out

    def hash(self) -> str:
        payload = {"name": self.name, "base": self.base.to_dict(), "align": self.align, "seeds": self.seeds,
                   "axes": [[list(k), [list(map(_jsonable, v)) for v in vals]] for k, vals in self.axes]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def check_key(key: str) -> None:
    if key in PSEUDO_KEYS:
        return
    obj = TrainConfig()
    for part in key.split("."):
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in dataclasses.fields(obj)}:
            raise SpecError(f"unknown config field {key!r}")
        obj = getattr(obj, part)


def _set_path(obj, path: list[str], value):
    head, rest = path[0], path[1:]
    if not rest:
        current = getattr(obj, head)
        if isinstance(current, tuple) and not isinstance(value, tuple):
            value = tuple(value) if isinstance(value, list) else (value,)
        return replace(obj, **{head: value})
    return replace(obj, **{head: _set_path(getattr(obj, head), rest, value)})


def apply_overrides(base: TrainConfig, overrides: dict) -> TrainConfig:
    cfg = base
    for key, value in overrides.items():
        if key in PSEUDO_KEYS:
            continue
        check_key(key)
        cfg = _set_path(cfg, key.split("."), value)
    return cfg


def _value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_spec(text: str, base: TrainConfig | None = None) -> ExperimentSpec:
    name, seeds, align, axes, sets = None, [0], True, [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        lhs, eq, rhs = line.partition("=")
        if not eq:
            raise SpecError(f"line {lineno}: expected 'key = value', got {raw!r}")
        lhs = lhs.strip()
        if lhs == "name":
            name = rhs.strip()
        elif lhs == "seeds":
            try:
                seeds = [int(s) for s in rhs.replace(",", " ").split()]
            except ValueError:
                raise SpecError(f"line {lineno}: seeds must be integers") from None
        elif lhs == "align":
            align = bool(_value(rhs))
        elif lhs.startswith("set "):
            key = lhs[4:].strip()
            check_key(key)
            sets[key] = _value(rhs)
        elif lhs.startswith("grid "):
            keys = tuple(k.strip() for k in lhs[5:].split(","))
            values = []
            for chunk in rhs.split("|"):
                parts = [chunk] if len(keys) == 1 else chunk.split(",")
                values.append(tuple(_value(p) for p in parts))
            axes.append((keys, values))
        else:
            raise SpecError(f"line {lineno}: unknown directive {lhs!r}")
    if not name:
        raise SpecError("spec has no name")
    if "align" in sets:
        align = bool(sets.pop("align"))
    return ExperimentSpec(name, apply_overrides(base or TrainConfig(), sets), axes, seeds, align=align)


def load_spec(path, base: TrainConfig | None = None) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing experiment spec: {path}")
    return parse_spec(path.read_text(), base)


# ---------------------------------------------------------------- running


def stage1_key(cfg: TrainConfig) -> str:
    defaults = TrainConfig()
    return replace(cfg, **{f: getattr(defaults, f) for f in STAGE2_FIELDS}).hash()


@dataclass
class RunResult:
    point: str
    seed: int
    config_hash: str
    status: str
    metrics: dict[str, float] = field(default_factory=dict)


def point_label(overrides: dict) -> str:
    return ";".join(f"{k}={_fmt(v)}" for k, v in overrides.items())


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


class Runner:
    """Runs grid points against one corpus, memoising stage-1 models (and disk checkpoints)."""

    def __init__(self, dataset, out_dir: Path | None = None):
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._stage1: dict[str, seg.PolicyParams] = {}
        self._caches: dict[tuple, tr.AlignmentCache] = {}
        self._test: dict[str, tuple] = {}

    def stage1(self, cfg: TrainConfig) -> seg.PolicyParams:
        key = stage1_key(cfg)
        if key not in self._stage1:
            path = self.out_dir / "stage1" / f"{key}.ckpt" if self.out_dir else None
            if path is not None and path.is_file():
                self._stage1[key] = seg.load_checkpoint(path)
            else:
                ann, _ = tr.select_training(self.dataset, cfg)
                params, _, _ = tr.train_stage1(cfg, ann)
                if path is not None:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    seg.save_checkpoint(path, params, extra={"stage1_key": key})
                self._stage1[key] = params
        return self._stage1[key]

    def aligned(self, cfg: TrainConfig) -> seg.PolicyParams:
        pf = self.stage1(cfg)
        _, un = tr.select_training(self.dataset, cfg)
        ckey = (stage1_key(cfg), cfg.unannotated_fraction)
        if ckey not in self._caches:
            self._caches[ckey] = tr.build_alignment_cache(pf, un, cfg)
        psi, _, _ = tr.align_stage2(pf, cfg, un, cache=self._caches[ckey])
        return psi

    def test_prompts(self, cfg: TrainConfig):
        key = replace(TrainConfig(), prompt=cfg.prompt, seed=cfg.seed).hash()
        if key not in self._test:
            self._test[key] = tr.prepare(self.dataset.split("test"), cfg, fallback=True)[:2]
        return self._test[key]

    def run(self, cfg: TrainConfig, align: bool = True):
        policy = self.aligned(cfg) if align else self.stage1(cfg)
        samples, prompts = self.test_prompts(cfg)
        return tr.evaluate(policy, samples, cfg, prompts=prompts)


def report_metrics(report) -> dict[str, float]:
    cm = report.class_means
    return {
        "iou": report.mean_iou,
        "dice": report.mean_dice,
        "mdice": float(np.mean([v[0] for v in cm.values()])),
        "msdc": float(np.mean([v[2] for v in cm.values()])),
    }


def _run_point(runner: Runner, spec: ExperimentSpec, overrides: dict) -> list[RunResult]:
    results = []
    label = point_label(overrides)
    align = bool(overrides.get("align", spec.align))
    for seed in spec.seeds:
        try:
            cfg = apply_overrides(replace(spec.base, seed=seed), overrides)
        except (ValueError, TypeError) as exc:
            results.append(RunResult(label, seed, "", f"error: {exc}"))
            continue
        h = cfg.hash()
        try:
            rep = runner.run(cfg, align)
            if runner.out_dir is not None:
                run_dir = runner.out_dir / "runs" / h
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "report.csv").write_text(rep.to_csv())
            results.append(RunResult(label, seed, h, "ok", report_metrics(rep)))
        except Exception as exc:  # recorded and skipped so the grid keeps going
            log.exception("run %s seed %d failed", label, seed)
            reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            results.append(RunResult(label, seed, h, f"error: {type(exc).__name__}: {reason}"))
        log.info("%s seed %d: %s", label, seed, results[-1].status)
    return results


_WORKER: Runner | None = None


def _worker_init(manifest_path, out_dir):
    global _WORKER
    _WORKER = Runner(sd.load_dataset(manifest_path), out_dir)


def _worker_run(spec, overrides):
    return _run_point(_WORKER, spec, overrides)


def run_experiment(spec: ExperimentSpec, dataset, out_dir=None, jobs: int = 1, runner: Runner | None = None):
    """Run every grid point for every seed. Returns (results, table CSV text)."""
    out = Path(out_dir) if out_dir is not None else None
    points = spec.points()
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(jobs, initializer=_worker_init, initargs=(dataset.manifest.path, out)) as pool:
            chunks = list(pool.map(_worker_run, [spec] * len(points), points))
    else:
        runner = runner or Runner(dataset, out)
        chunks = [_run_point(runner, spec, p) for p in points]
    results = [r for chunk in chunks for r in chunk]
    text = results_csv(spec, results, points)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{spec.name}.csv").write_text(text)
    return results, text


def results_csv(spec: ExperimentSpec, results: list[RunResult], points: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# experiment={spec.name}\n")
    buf.write(f"# spec_hash={spec.hash()}\n")
    buf.write(f"# base_config_hash={spec.base.hash()}\n")
    buf.write(f"# sdc_tolerance_px={spec.base.sdc_tolerance!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "point", "seed", "config_hash", "status", *METRICS, *(f"{m}_std" for m in METRICS), "n"])
    for r in results:
        vals = [repr(r.metrics[m]) if r.metrics else "" for m in METRICS]
        w.writerow(["run", r.point, r.seed, r.config_hash, r.status, *vals, *[""] * len(METRICS), ""])
    for p in points:
        label = point_label(p)
        ok = [r for r in results if r.point == label and r.status == "ok"]
        if ok:
            arr = np.array([[r.metrics[m] for m in METRICS] for r in ok])
            means, stds = arr.mean(axis=0), arr.std(axis=0)
            status = "ok" if len(ok) == len(spec.seeds) else f"partial {len(ok)}/{len(spec.seeds)}"
            w.writerow(["mean", label, "", "", status, *map(repr, means.tolist()), *map(repr, stds.tolist()), len(ok)])
        else:
            w.writerow(["mean", label, "", "", "error: no successful runs", *[""] * (2 * len(METRICS)), 0])
    return buf.getvalue()


def read_table(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from segpref import experiments as ex
from segpref import metrics as mt
from segpref import synthdata as sd
from segpref import trainer as tr
from segpref.segmenter import SegmenterConfig

SMALL = SegmenterConfig(width=8, enc_channels=4, dec_channels=(4, 4), feedback_channels=2, pe_freqs=2, text_dim=16)


class FakeRunner(ex.Runner):
    """Scores derived from the config hash, so bookkeeping can be checked without training."""

    def __init__(self, fail_seed=None):
        super().__init__(dataset=None)
        self.calls = []
        self.fail_seed = fail_seed

    def run(self, cfg, align=True):
        self.calls.append((cfg, align))
        if cfg.seed == self.fail_seed:
            raise RuntimeError("boom")
        v = int(cfg.hash()[:6], 16) / 16**6
        rows = [mt.MetricRow(0, 0, v, v / (2 - v), v), mt.MetricRow(1, 1, v / 2, v / 4, v)]
        return mt.aggregate(rows)


SPEC = """
# scoring strategies
name = strategies
seeds = 0 1 2 3 4
set epochs_stage2 = 2
grid strategy = ranking | rating | best
"""


def test_parse_spec_fields():
    spec = ex.parse_spec(SPEC)
    assert spec.name == "strategies"
    assert spec.seeds == [0, 1, 2, 3, 4]
    assert spec.base.epochs_stage2 == 2
    assert spec.points() == [{"strategy": "ranking"}, {"strategy": "rating"}, {"strategy": "best"}]


def test_grid_product_and_joint_keys():
    spec = ex.parse_spec("name = x\ngrid dpo.beta1, dpo.beta2 = 2, 1 | 1, 0.5\ngrid flip_fraction = 0.0 | 0.3\n")
    pts = spec.points()
    assert len(pts) == 4
    assert pts[0] == {"dpo.beta1": 2, "dpo.beta2": 1, "flip_fraction": 0.0}
    cfg = ex.apply_overrides(spec.base, pts[-1])
    assert (cfg.dpo.beta1, cfg.dpo.beta2, cfg.flip_fraction) == (1, 0.5, 0.3)


@pytest.mark.parametrize("text, msg", [
    ("name = x\n", "grid is empty"),
    ("name = x\nseeds =\ngrid strategy = best\n", "no seeds"),
    ("name = x\ngrid no_such_field = 1\n", "unknown config field"),
    ("name = x\nset dpo.gamma = 1\ngrid strategy = best\n", "unknown config field"),
    ("grid strategy = best\n", "no name"),
    ("name = x\ngrid dpo.beta1, dpo.beta2 = 1, 2 | 3\n", "does not match"),
    ("name = x\nwhat is this\n", "expected"),
])
def test_spec_validation(text, msg):
    with pytest.raises(ex.SpecError, match=msg):
        ex.parse_spec(text)


def test_missing_spec_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        ex.load_spec(tmp_path / "nope.txt")


def test_strategy_grid_rows():
    spec = ex.parse_spec(SPEC)
    results, text = ex.run_experiment(spec, None, runner=FakeRunner())
    rows = ex.read_table(text)
    runs = [r for r in rows if r["kind"] == "run"]
    means = [r for r in rows if r["kind"] == "mean"]
    assert len(runs) == 15 and len(means) == 3
    assert all(r["status"] == "ok" for r in rows)
    for m in means:
        dice = [float(r["dice"]) for r in runs if r["point"] == m["point"]]
        assert float(m["dice"]) == pytest.approx(np.mean(dice), abs=1e-15)
        assert float(m["dice_std"]) == pytest.approx(np.std(dice), abs=1e-15)
        assert int(m["n"]) == 5
    for col in ("iou", "dice", "mdice", "msdc"):
        assert col in rows[0]


def test_table_header_lines():
    spec = ex.parse_spec(SPEC)
    _, text = ex.run_experiment(spec, None, runner=FakeRunner())
    head = [ln for ln in text.splitlines() if ln.startswith("#")]
    assert head[0] == "# experiment=strategies"
    assert f"# base_config_hash={spec.base.hash()}" in head
    assert any(ln.startswith("# sdc_tolerance_px=") for ln in head)


def test_beta_sweep_layout():
    spec = ex.parse_spec("name = beta\nseeds = 0\ngrid dpo.beta1, dpo.beta2 = 2, 1 | 1.5, 0.75 | 1, 0.5\n")
    runner = FakeRunner()
    _, text = ex.run_experiment(spec, None, runner=runner)
    means = [r for r in ex.read_table(text) if r["kind"] == "mean"]
    assert [m["point"] for m in means] == ["dpo.beta1=2;dpo.beta2=1", "dpo.beta1=1.5;dpo.beta2=0.75",
                                          "dpo.beta1=1;dpo.beta2=0.5"]
    assert [(c.dpo.beta1, c.dpo.beta2) for c, _ in runner.calls] == [(2, 1), (1.5, 0.75), (1, 0.5)]


def test_failed_run_recorded_and_grid_continues():
    spec = ex.parse_spec(SPEC)
    results, text = ex.run_experiment(spec, None, runner=FakeRunner(fail_seed=3))
    bad = [r for r in results if r.status != "ok"]
    assert len(bad) == 3 and all(r.seed == 3 and "RuntimeError: boom" in r.status for r in bad)
    means = [r for r in ex.read_table(text) if r["kind"] == "mean"]
    assert all(m["status"] == "partial 4/5" and m["n"] == "4" for m in means)


def test_invalid_override_value_is_an_error_row():
    spec = ex.parse_spec("name = x\nseeds = 0\ngrid flip_fraction = 0.2 | 7.0\n")
    results, _ = ex.run_experiment(spec, None, runner=FakeRunner())
    assert results[0].status == "ok"
    assert results[1].status.startswith("error")


def test_align_pseudo_key():
    spec = ex.parse_spec("name = x\nseeds = 0\ngrid align = false | true\n")
    runner = FakeRunner()
    ex.run_experiment(spec, None, runner=runner)
    assert [a for _, a in runner.calls] == [False, True]


def test_stage1_key_ignores_stage2_fields():
    a = tr.TrainConfig()
    b = replace(a, strategy="best", flip_fraction=0.3, lr_stage2=1e-2, dpo=replace(a.dpo, beta1=2.0))
    assert ex.stage1_key(a) == ex.stage1_key(b)
    assert ex.stage1_key(a) != ex.stage1_key(replace(a, annotated_fraction=0.2))
    assert ex.stage1_key(a) != ex.stage1_key(replace(a, seed=1))


# ---------------------------------------------------------------- real runs on a tiny corpus


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    sd.generate_dataset(root, seed=5, n=30, size=32, split_fractions=(0.3, 0.4, 0.3))
    return root


def tiny_spec():
    base = tr.TrainConfig(model=SMALL, epochs_stage1=1, epochs_stage2=1, initial_lr=3e-3,
                          annotated_fraction=0.4, unannotated_fraction=0.4)
    return ex.parse_spec("name = tiny\nseeds = 0 1\ngrid strategy = ranking | best\n", base)


def _snapshot(root):
    return {p.relative_to(root): (p.stat().st_mtime_ns, p.read_bytes()) for p in sorted(root.rglob("*")) if p.is_file()}


def test_real_runs_share_stage1_and_leave_dataset_untouched(tiny, tmp_path):
    before = _snapshot(tiny)
    spec = tiny_spec()
    results, text = ex.run_experiment(spec, sd.load_dataset(tiny), tmp_path / "out")
    assert _snapshot(tiny) == before
    assert all(r.status == "ok" for r in results), [r.status for r in results]
    assert len(list((tmp_path / "out" / "stage1").glob("*.ckpt"))) == 2
    assert len(list((tmp_path / "out" / "runs").glob("*/report.csv"))) == 4
    assert (tmp_path / "out" / "tiny.csv").read_text() == text
    # a second pass reuses the stage-1 checkpoints and reproduces the table byte for byte
    _, again = ex.run_experiment(spec, sd.load_dataset(tiny), tmp_path / "out")
    assert again == text


def test_parallel_jobs_match_sequential(tiny, tmp_path):
    spec = tiny_spec()
    results, seq = ex.run_experiment(spec, sd.load_dataset(tiny), tmp_path / "a", jobs=1)
    assert all(r.status == "ok" for r in results)
    _, par = ex.run_experiment(spec, sd.load_dataset(tiny), tmp_path / "b", jobs=2)
    assert seq == par


@pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "scripts" / "specs").glob("*.txt")),
                         ids=lambda p: p.stem)
def test_bundled_specs_parse(path):
    spec = ex.load_spec(path)
    assert spec.name == path.stem
    assert spec.points() and spec.seeds

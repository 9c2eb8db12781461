import dataclasses
import math

import pytest

from fairtl import harness
from fairtl.checkpoint import read_checkpoint
from fairtl.harness import (
    CSV_HEADER,
    AggregationError,
    CellResult,
    ExperimentGrid,
    RunConfig,
    aggregate,
    emit_reports,
    plots_from_csv,
    read_config,
    rows_to_csv,
    run_grid,
    write_config,
)

TINY = RunConfig(
    size_bias=200, perc=0.25, pretrain_epochs=2, adapt_epochs=2, adapt_min_steps=0, holdout_per_class=60,
    reference_per_class=50, eval_samples=256, eval_every=1, g_hidden=(8, 8),
)


def test_config_defaults_and_validation():
    cfg = RunConfig()
    assert cfg.lam == 0.6 and cfg.eval_samples == 4096
    with pytest.raises(ValueError):
        RunConfig(bias=(0.5, 0.3, 0.2))
    with pytest.raises(ValueError):
        RunConfig(perc=0.0)
    with pytest.raises(ValueError):
        RunConfig(lam=2.0)


def test_adapt_schedule_meets_step_floor():
    cfg = RunConfig()
    assert cfg.adapt_schedule(100) == (1000, 200)
    assert cfg.adapt_schedule(1000) == (125, 25)
    assert RunConfig(adapt_min_steps=0).adapt_schedule(100) == (100, 20)
    assert RunConfig(lp_epochs=7).adapt_schedule(1000) == (125, 7)


def test_resolved_config_hash_covers_derived_values():
    a, b = RunConfig(), RunConfig(perc=0.1)
    assert a.resolved()["adapt_epochs_resolved"] == 1000
    assert a.hash() != b.hash()
    assert a.hash(exclude_seed=True) == dataclasses.replace(a, seed=9).hash(exclude_seed=True)


def test_config_file_round_trip(tmp_path):
    cfg = dataclasses.replace(TINY, attributes=(("a", 2), ("b", 2)), bias=(0.437, 0.063, 0.415, 0.085))
    grid = ExperimentGrid(cfg, (cfg.bias,), (0.1, 0.05), ("fairTL",), (3, 4))
    write_config(cfg, tmp_path / "c.ini", grid)
    back, grid_map = read_config(tmp_path / "c.ini")
    assert back == cfg
    assert ExperimentGrid.from_mapping(back, grid_map) == grid


def test_unknown_config_key(tmp_path):
    (tmp_path / "c.ini").write_text("[run]\nlambda_typo = 0.5\n")
    with pytest.raises(ValueError):
        read_config(tmp_path / "c.ini")


def test_bias_id():
    assert harness.bias_id((0.9, 0.1)) == "90_10"
    assert harness.bias_id((0.437, 0.063, 0.415, 0.085)) == "43.7_6.3_41.5_8.5"


def test_single_cell_grid(tmp_path):
    grid = ExperimentGrid(TINY, ((0.9, 0.1),), (0.25,), ("fairTL",), (0,))
    res = run_grid(grid, tmp_path)
    assert len(res.rows) == 1 and not res.failures
    ckpts = list((tmp_path / "cells").rglob("*.ckpt"))
    assert len(ckpts) == 1
    state, manifest = read_checkpoint(ckpts[0])
    assert state.stage.value == "fairTL" and manifest["config_hash"] == TINY.hash()
    text = (tmp_path / "report.csv").read_text()
    assert text.splitlines()[0] == ",".join(CSV_HEADER) and len(text.splitlines()) == 2
    assert (ckpts[0].parent / "fairTL_metrics.csv").read_text().count("\n") == 1 + TINY.adapt_epochs


def test_two_seeds_aggregate_with_std(tmp_path):
    grid = ExperimentGrid(TINY, ((0.9, 0.1),), (0.25,), ("pretrained",), (0, 1))
    res = run_grid(grid, tmp_path)
    (row,) = res.rows
    assert row.seeds == 2 and row.fd_std is not None
    fds = sorted(c.fd for c in res.cells)
    assert row.fd_mean == pytest.approx(sum(fds) / 2)


def test_single_seed_has_no_std():
    rows = aggregate([CellResult("fairTL", 0.1, "90_10", 0, 0.2, 1.0, 1.0, "h")])
    assert rows[0].fd_std is None
    assert rows_to_csv(rows).splitlines()[1].split(",")[5] == ""


def test_hash_mismatch_refused_unless_forced():
    cells = [CellResult("fairTL", 0.1, "90_10", s, 0.2, 1.0, 1.0, f"h{s}") for s in range(2)]
    with pytest.raises(AggregationError):
        aggregate(cells)
    assert aggregate(cells, force=True)[0].seeds == 2


def test_failed_cells_are_isolated(tmp_path, monkeypatch):
    real = harness.adapt_fairtlpp

    def broken(*args, **kwargs):
        raise RuntimeError("boom")

    grid = ExperimentGrid(TINY, ((0.9, 0.1),), (0.25,), ("fairTL", "fairTL++"), (0,))
    clean = run_grid(grid)
    monkeypatch.setattr(harness, "adapt_fairtlpp", broken)
    res = run_grid(grid, tmp_path)
    monkeypatch.setattr(harness, "adapt_fairtlpp", real)
    (failed,) = res.failures
    assert failed.method == "fairTL++" and "boom" in failed.error
    assert [r.method for r in res.rows] == ["fairTL"]
    assert res.rows[0].fd_mean == clean.rows[0].fd_mean
    assert "boom" in (tmp_path / "failures.json").read_text()


def test_serial_and_parallel_grids_agree(tmp_path):
    grid = ExperimentGrid(TINY, ((0.9, 0.1),), (0.25, 0.1), ("pretrained", "fairTL++"), (0, 1))
    a = run_grid(grid, tmp_path / "a", parallelism=1)
    b = run_grid(grid, tmp_path / "b", parallelism=2)
    ta, tb = (tmp_path / "a" / "report.csv").read_text(), (tmp_path / "b" / "report.csv").read_text()
    assert harness.numeric_columns(ta) == harness.numeric_columns(tb)
    assert [(c.fd, c.frechet) for c in a.cells] == [(c.fd, c.frechet) for c in b.cells]


def test_reports_reject_empty_and_plots_are_pure(tmp_path):
    with pytest.raises(ValueError):
        emit_reports([], tmp_path)
    cells = [CellResult(m, p, "90_10", s, 0.1 * s + p, 1.0 + s, 0.5, "h")
             for m in ("pretrained", "fairTL") for p in (0.25, 0.1) for s in (0, 1)]
    written = emit_reports(aggregate(cells), tmp_path)
    text = written["report.csv"].read_text()
    assert plots_from_csv(text) == plots_from_csv(text)
    for name, svg in plots_from_csv(text).items():
        assert written[name].read_text() == svg
        assert svg.startswith("<svg")


def test_csv_full_precision():
    rows = aggregate([CellResult("fairTL", 0.1, "90_10", 0, 1 / 3, math.pi, 0.0, "h")])
    line = rows_to_csv(rows).splitlines()[1].split(",")
    assert float(line[4]) == 1 / 3 and float(line[6]) == math.pi
    assert len(line[4].replace("0.", "", 1)) >= 17


def test_layer_study_via_config():
    cfg = dataclasses.replace(TINY, perc=1.0)
    study = harness.run_layer_study(cfg, zero_epochs=True)
    assert len(study.rows) == 6 and all(r.mean_change == 0.0 for r in study.rows)
    assert harness.layer_study_csv(study).count("\n") == 7


def test_data_directory_round_trip(tmp_path):
    pair = harness.build_data(TINY)
    harness.save_pair(pair, 2, tmp_path)
    back = harness.load_pair(tmp_path)
    assert (back.d_ref.features == pair.d_ref.features).all()
    assert back.bias_vector == pair.bias_vector

"""Tests for the ablation runner, report rendering and embedding export."""

import csv
import json

import numpy as np
import pytest

from cmkd import instrumentation
from cmkd.checkpoint import Checkpoint
from cmkd.evaluation import (
    config_for_mask,
    embed,
    evaluate_model,
    export_embeddings,
    format_ablation,
    format_report,
    format_summary,
    read_embeddings,
    run_ablation,
    write_ablation_table,
)
from cmkd.exceptions import DataError, DataFormatError
from cmkd.schemas import AblationGrid, LossWeights, MetricSummary, Task
from cmkd.training import run_cv


class TestMasks:
    """Tests for config_for_mask and AblationGrid"""

    def test_mask_zeroes_other_terms(self, smoke_config):
        """Test that masked-out λ become 0 and the task loss stays on."""
        config = config_for_mask(smoke_config, ["sim", "task"])
        assert config.loss.weights == LossWeights(sim=1, unc=0, kd=0, task=1)

    def test_masked_in_zero_weight_is_enabled(self, smoke_config):
        """Test that a term switched on by the mask gets weight 1."""
        base = smoke_config.model_copy(
            update={
                "loss": smoke_config.loss.model_copy(
                    update={"weights": LossWeights(sim=0.5, unc=0, kd=2, task=1)}
                )
            }
        )
        weights = config_for_mask(base, ["sim", "unc", "task"]).loss.weights
        assert (weights.sim, weights.unc, weights.kd) == (0.5, 1.0, 0.0)

    def test_default_grid(self):
        """Test the seven default rows, each with the task loss."""
        grid = AblationGrid()
        assert len(grid.masks) == 7
        assert all(m[-1] == "task" for m in grid.masks)
        assert grid.masks[-1] == ["sim", "unc", "kd", "task"]

    def test_grid_rejects_duplicates_and_unknown(self):
        """Test mask validation."""
        with pytest.raises(ValueError):
            AblationGrid(masks=[["sim"], ["sim", "task"]])
        with pytest.raises(ValueError):
            AblationGrid(masks=[["entropy"]])


class TestAblation:
    """Tests for run_ablation and its outputs"""

    def test_single_mask(self, dec_dataset, smoke_config, tmp_path):
        """Test that one mask yields one row and both output files."""
        grid = AblationGrid(masks=[["kd"]])
        table = run_ablation(dec_dataset, smoke_config, grid, workers=1)
        assert len(table.rows) == 1
        row = table.rows[0]
        assert row.mask == {"sim": False, "unc": False, "kd": True, "task": True}
        assert all(
            f.op_counts[instrumentation.SIMILARITY] == 0 for f in row.report.folds
        )

        csv_path, json_path = write_ablation_table(table, tmp_path / "abl")
        with open(csv_path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:4] == ["sim", "unc", "kd", "task"]
        assert "accuracy_mean" in rows[0] and "clean_macro_f1_std" in rows[0]
        assert rows[1][:4] == ["0", "0", "1", "1"]
        mean = float(rows[1][rows[0].index("accuracy_mean")])
        assert mean == row.report.aggregate["accuracy"].mean
        reports = json.loads(json_path.read_text(encoding="utf-8"))
        assert len(reports) == 1 and len(reports[0]["folds"]) == 3

    def test_all_terms_row(self, dec_dataset, smoke_config):
        """Test that the full mask exercises every instrumented operation."""
        grid = AblationGrid(masks=[["sim", "unc", "kd"]])
        table = run_ablation(dec_dataset, smoke_config, grid, workers=1)
        for fold in table.rows[0].report.folds:
            assert all(count > 0 for count in fold.op_counts.values())

    def test_identical_masks_reproduce(self, dec_dataset, smoke_config):
        """Test that rows are deterministic across runs."""
        grid = AblationGrid(masks=[["sim"]])
        a = run_ablation(dec_dataset, smoke_config, grid, workers=1)
        b = run_ablation(dec_dataset, smoke_config, grid, workers=1)
        assert a.rows[0].report.model_dump() == b.rows[0].report.model_dump()

    def test_format_ablation(self, dec_dataset, smoke_config):
        """Test the console table."""
        grid = AblationGrid(masks=[["sim"], ["unc", "kd"]])
        table = run_ablation(dec_dataset, smoke_config, grid, workers=1)
        lines = format_ablation(table).splitlines()
        assert len(lines) == 3
        assert lines[1].startswith("sim+task")
        assert lines[2].startswith("unc+kd+task")


class TestRendering:
    """Tests for report formatting"""

    def test_format_summary(self):
        """Test mean±std rendering with explicit decimals."""
        summary = MetricSummary(mean=0.5713, std=0.0241, values=[0.5, 0.6])
        assert format_summary(summary, decimals=3) == "0.571±0.024"

    def test_format_report(self, dec_dataset, smoke_config):
        """Test that every aggregate metric is listed."""
        report, _, _ = run_cv(dec_dataset, smoke_config, workers=1)
        text = format_report(report)
        assert text.startswith("task=dec seed=0 folds=3")
        assert "accuracy" in text and "clean" in text


class TestCheckpointEvaluation:
    """Tests for evaluate_model"""

    def test_val_split_reproduces_fold_metrics(self, dec_dataset, smoke_config):
        """Test that val-split evaluation equals the fold record."""
        report, _, results = run_cv(dec_dataset, smoke_config, workers=1)
        record = report.folds[1]
        checkpoint = Checkpoint(
            results[1].student, metadata={"val_trials": record.val_trials}
        )
        out = evaluate_model(checkpoint, dec_dataset, split="val")
        assert out["metrics"] == record.metrics
        assert out["n"] == record.n_val
        assert out["role"] == "student"

    def test_all_split(self, dec_dataset, smoke_config):
        """Test evaluation on the whole dataset."""
        _, teacher, _ = run_cv(dec_dataset, smoke_config, workers=1)
        out = evaluate_model(Checkpoint(teacher), dec_dataset)
        assert out["n"] == len(dec_dataset) and out["role"] == "teacher"

    def test_task_mismatch(self, dec_dataset, cer_dataset, smoke_config):
        """Test that a DEC checkpoint cannot score CER data."""
        _, teacher, _ = run_cv(dec_dataset, smoke_config, workers=1)
        with pytest.raises(DataError):
            evaluate_model(Checkpoint(teacher), cer_dataset)

    def test_val_split_needs_metadata(self, dec_dataset, smoke_config):
        """Test that split=val requires recorded held-out trials."""
        _, teacher, _ = run_cv(dec_dataset, smoke_config, workers=1)
        with pytest.raises(DataError):
            evaluate_model(Checkpoint(teacher), dec_dataset, split="val")


class TestEmbeddings:
    """Tests for export_embeddings and read_embeddings"""

    def test_export_shape_and_values(self, tmp_path, dec_dataset, smoke_config):
        """Test N rows of 2 + d columns holding the recomputed embeddings."""
        _, _, results = run_cv(dec_dataset, smoke_config, workers=1)
        student = results[0].student
        path = tmp_path / "emb.csv"
        assert export_embeddings(student, dec_dataset, path) == len(dec_dataset)
        trial_ids, y, e = read_embeddings(path)
        assert e.shape == (len(dec_dataset), 4)
        assert np.array_equal(trial_ids, dec_dataset.trial_ids)
        assert np.array_equal(y, dec_dataset.y)
        assert np.array_equal(e, embed(student, dec_dataset))
        header = path.read_text(encoding="utf-8").splitlines()[0]
        assert header == "trial_id,y,e_0,e_1,e_2,e_3"

    def test_cer_labels(self, tmp_path, cer_dataset, make_config):
        """Test that continuous labels survive the export exactly."""
        _, teacher, _ = run_cv(cer_dataset, make_config(task=Task.CER), workers=1)
        path = tmp_path / "emb.csv"
        export_embeddings(teacher, cer_dataset, path)
        _, y, _ = read_embeddings(path)
        assert np.array_equal(y, cer_dataset.y)

    def test_read_reports_line(self, tmp_path):
        """Test that a short row names its line."""
        path = tmp_path / "emb.csv"
        path.write_text("trial_id,y,e_0\n0,1,0.5\n1,0\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="line 3"):
            read_embeddings(path)

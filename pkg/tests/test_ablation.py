import csv
import io
import math

import pytest

from function.compute_model.model import ModelConfig
from function.compute_train.ablation import (
    TABLE_COLUMNS, apply_overrides, expand_grid, run_ablation, run_experiment, table_csv, table_json,
)
from function.compute_train.trainer import TrainConfig
from function.errors import ConfigError


@pytest.fixture
def base_config():
    return TrainConfig(model=ModelConfig(dim=8), epochs_s1=1, epochs_s2=1, batch_size=6,
                       s1_fraction=0.25, lr_s1=1e-3, lr_s2=1e-3, seed=3)


MODULE_GRID = [
    {"mcfuse_enabled": False, "xobjalign_enabled": False},
    {"mcfuse_enabled": True, "xobjalign_enabled": False},
    {"mcfuse_enabled": False, "xobjalign_enabled": True},
    {"mcfuse_enabled": True, "xobjalign_enabled": True},
]


class TestGrid:
    def test_cells_forms(self):
        assert expand_grid(MODULE_GRID) == MODULE_GRID
        assert expand_grid({"cells": MODULE_GRID[:2]}) == MODULE_GRID[:2]

    def test_axes_product_order(self):
        cells = expand_grid({"axes": {"fusion.variant": ["add", "ca_plain"], "align.lambda_xobj": [0.2, 1.0]}})
        assert cells == [
            {"fusion.variant": "add", "align.lambda_xobj": 0.2},
            {"fusion.variant": "add", "align.lambda_xobj": 1.0},
            {"fusion.variant": "ca_plain", "align.lambda_xobj": 0.2},
            {"fusion.variant": "ca_plain", "align.lambda_xobj": 1.0},
        ]

    @pytest.mark.parametrize("grid", [[], {"cells": []}, {"rows": []}, [1, 2]])
    def test_malformed_grids(self, grid):
        with pytest.raises(ConfigError):
            expand_grid(grid)

    def test_dotted_and_nested_overrides(self, base_config):
        config = apply_overrides(base_config, {"fusion.variant": "fixed_k", "align": {"metric": "cosine"},
                                               "epochs_s2": 3})
        assert config.fusion.variant == "fixed_k"
        assert config.align.metric == "cosine"
        assert config.epochs_s2 == 3
        assert base_config.fusion.variant == "learnable_residual"

    def test_unknown_override_path(self, base_config):
        with pytest.raises(ConfigError):
            apply_overrides(base_config, {"fusion.strength": 1.0})


class TestRuns:
    def test_experiment_report(self, base_config, tiny_dataset):
        _, trainer, report = run_experiment(base_config, tiny_dataset, eval_modes=("dual", "visual_only"))
        assert set(report.metrics) == {"dual", "visual_only"}
        assert list(report.metrics["dual"]) == ["ego2exo"]
        assert 0.0 < report.k_lea < 1.0
        assert report.completed_stage == "s2"
        assert report.parameter_count == trainer.model.parameter_count()
        record = report.to_dict()
        assert "wall_clock_s" not in record and len(record["config_fingerprint"]) == 64

    def test_module_grid_rows_in_order(self, base_config, tiny_dataset):
        rows = run_ablation(MODULE_GRID, base_config, tiny_dataset, threads=2)
        assert [row.run_id for row in rows] == [0, 1, 2, 3]
        assert all(row.error is None for row in rows)
        assert [(r.config.mcfuse_enabled, r.config.xobjalign_enabled) for r in rows] == \
            [(c["mcfuse_enabled"], c["xobjalign_enabled"]) for c in MODULE_GRID]
        assert rows[0].report.k_lea is None

        table = list(csv.DictReader(io.StringIO(table_csv(rows))))
        assert len(table) == 4
        assert list(table[0]) == list(TABLE_COLUMNS)
        assert table[1]["mcfuse"] == "True"

    def test_table_reads_requested_mode(self, base_config, tiny_dataset):
        (row,) = run_ablation([{"fusion.variant": "add"}], base_config, tiny_dataset,
                              eval_modes=("visual_only", "dual"), threads=1)
        cells = row.table_row()
        visual_only = row.report.metrics["visual_only"]["ego2exo"]
        assert not math.isnan(cells["iou"])
        assert cells["iou"] == visual_only["iou"] and cells["va"] == visual_only["va"]
        assert cells["n_samples"] == tiny_dataset.size("val")

    def test_failing_cell_keeps_its_row(self, base_config, tiny_dataset):
        grid = [{"model.image_size": 32, "model.patch_size": 8}, {"no_such_key": 1}]
        rows = run_ablation(grid, base_config, tiny_dataset, threads=1)
        assert len(rows) == 2
        for row in rows:
            assert row.error is not None and "ConfigError" in row.error
            assert math.isnan(row.table_row()["iou"])
        document = table_json(rows, {"grid": grid})
        assert document["runs"][0]["report"] is None
        assert document["columns"] == list(TABLE_COLUMNS)

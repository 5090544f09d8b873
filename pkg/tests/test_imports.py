"""Every package module imports without side effects."""

import importlib

import pytest

MODULES = [
    "app",
    "logic.diff_core",
    "logic.geometry",
    "logic.scene_sim",
    "logic.scenarios",
    "logic.neural_map",
    "logic.renderer",
    "logic.segmentation",
    "logic.classifier",
    "logic.motion_status",
    "logic.slam",
    "logic.evaluation",
    "logic.gradcheck",
    "logic.ablation",
    "models.config",
    "models.data_models",
    "models.exceptions",
    "models.reports",
    "models.scene",
    "services.run_audit",
    "services.run_logs",
    "storage.checkpoints",
    "storage.dataset",
    "storage.rasters",
]


@pytest.mark.unit
@pytest.mark.parametrize("name", MODULES)
def test_imports(name):
    importlib.import_module(name)

"""
Gemeinsame pytest-Konfiguration für die Tests des capsule-Transformers
"""

import os
import sys

import pytest

# Füge Projektverzeichnis zum Pfad hinzu
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.tensor import set_default_dtype


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="Lange End-to-End-Trainingsläufe ausführen")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="benötigt --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def reset_precision():
    """
    Stellt nach jedem Test die Standardpräzision float64 wieder her
    """
    yield
    set_default_dtype("float64")

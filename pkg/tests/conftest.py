import numpy as np
import pytest

from rcr.calibration import CorrectionTable, load_table


@pytest.fixture(scope="session")
def table() -> CorrectionTable:
    return load_table()


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)


def scaled_table(table: CorrectionTable, factor: float) -> CorrectionTable:
    """Copy of ``table`` with every factor multiplied by ``factor``."""
    out = CorrectionTable(trials=table.trials, seed=table.seed)
    for key, (ns, fs, ses) in table.cells.items():
        out.cells[key] = (ns.copy(), fs * factor, ses.copy())
    return out

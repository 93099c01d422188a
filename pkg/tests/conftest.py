import numpy as np
import pytest

from brw.kernel import TorusGrid
from brw.model import binary_example
from brw.simulator import run_ensemble


@pytest.fixture(scope="session")
def warm_engine():
    """Compile the event-loop kernels once so timed tests measure runs, not JIT."""
    params = binary_example()
    run_ensemble(params, TorusGrid((8,)), 0.5, [0.5], 2, master_seed=0)
    from brw.simulator import FieldState, drift_audit
    drift_audit(params, FieldState(TorusGrid((8,)), np.ones(8, dtype=np.int64), 0.0),
                1e-3, 10, seed=0, pairs=[(0, 1)])
    return True

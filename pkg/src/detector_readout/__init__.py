"""Detector-based readout of quantum-simulator correlators on Matsubara grids.

Submodules: :mod:`.grid` (frequency grids and transforms), :mod:`.bare`
(closed-form bare correlators), :mod:`.dyson` (dressing and extraction),
:mod:`.ed` (exact-diagonalization oracle), :mod:`.continuation` (Pade
continuation) and :mod:`.cli` (scenario runner).
"""
__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .grid import *  # noqa: F401,F403
from .bare import *  # noqa: F401,F403
from .dyson import *  # noqa: F401,F403
from .ed import *  # noqa: F401,F403
from .continuation import *  # noqa: F401,F403
from . import errors, grid, bare, dyson, ed, continuation  # noqa: F401

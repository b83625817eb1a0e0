"""Bundled generators, simulators, configuration, and the command line."""

import os

# C source of the stand-in simulation; test harnesses compile it on demand.
STUB_APP_SOURCE = os.path.join(os.path.dirname(__file__), "stub", "forces_stub.c")
CONFIGS_DIR = os.path.join(os.path.dirname(__file__), "configs")

from .config import ConfigError, EnsembleConfig, load_config  # noqa: E402,F401
from .functions import GENERATORS, SIMULATORS  # noqa: E402,F401
from .objective import make_objective  # noqa: E402,F401

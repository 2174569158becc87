"""Fault-tolerant quadcopter control: simulator, RL controllers, LSTM fault detection."""

from ._fqc import *  # noqa: F401,F403
from ._fqc import __doc__  # noqa: F401

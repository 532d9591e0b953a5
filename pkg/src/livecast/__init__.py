"""Live forecasting of grid-structured cellular traffic.

Two online schedulers are provided: FLSP, which snapshots and restores a
recurrent predictor's state between feeds, and the rolling scheduler, which
replays a bounded history window after every feed.
"""

__version__ = "0.1.0"

from .engine import FlspSession, RollingSession, StreamConfig, make_session  # noqa: E402
from .neural import ModelSpec, build_model, train  # noqa: E402
from .sim import GridSpec, generate  # noqa: E402
from .stats import SarimaOrder, StatPredictor, fit  # noqa: E402

__all__ = [
    "FlspSession", "GridSpec", "ModelSpec", "RollingSession", "SarimaOrder", "StatPredictor",
    "StreamConfig", "build_model", "fit", "generate", "make_session", "train",
]

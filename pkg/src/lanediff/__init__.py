__version__ = "0.1.0"

import importlib.resources
import os

__datapath__ = os.path.join(importlib.resources.files("lanediff"), "data")


from .config import RunConfig
from .lane_graph import Polyline
from .lane_graph import SegmentGraph
from .metrics import MetricReport
from .model import LaneDiffusionModel

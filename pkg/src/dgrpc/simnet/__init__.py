from .clock import VirtualClock
from .config import ConfigError, SimConfig
from .net import Host, Link, SimNet, SwitchModel, build_topology

__all__ = [
    "ConfigError", "Host", "Link", "SimConfig", "SimNet", "SwitchModel", "VirtualClock",
    "build_topology",
]

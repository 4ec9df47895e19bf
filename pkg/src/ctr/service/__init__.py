"""Node daemon: hosts simulated processes and exposes the agent over HTTP."""

from .app import create_app
from .node import Node, process_info

__all__ = ["create_app", "Node", "process_info"]

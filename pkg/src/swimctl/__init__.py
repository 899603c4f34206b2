"""Feedback stabilization of a rigid disk in a viscous fluid, on a fixed reference mesh.

Submodules are imported on demand; ``swimctl.cli`` is the command line entry.
"""

__version__ = "0.1.0"

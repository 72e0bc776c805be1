"""Surface reconstruction with flattened 3D Gaussians on synthetic scenes.

Submodules are imported on demand; ``splatsurf.cli`` is the command-line
entry point.
"""

__version__ = "0.1.0"

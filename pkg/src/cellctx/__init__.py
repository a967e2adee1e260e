"""Cell detection with RoI-relationship and global RoI attention, built on a small numpy autodiff core."""

__version__ = "0.1.0"

"""Class-agnostic detection toolkit: deformable attention, late text fusion, evaluation."""

__version__ = "0.1.0"

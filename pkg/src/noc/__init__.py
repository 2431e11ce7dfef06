"""Numerical first- and second-order necessary-condition checks for optimal
control on Riemannian manifolds, with refutation certificates."""
from __future__ import annotations

__version__ = "0.1.0"

"""Figure rendering for rfcal sweep CSVs.

Consumes the CSV interface only (schemas rfcal-theory-v1 / rfcal-mc-v1);
never recomputes any quantity.
"""

from .render import FigureSpec, main, render

__all__ = ["FigureSpec", "main", "render"]

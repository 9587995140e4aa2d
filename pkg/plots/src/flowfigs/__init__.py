"""Figure rendering for probability-flow run artifacts."""

from .render import KINDS, FigureSpec, SchemaError, render, run

__version__ = "0.1.0"

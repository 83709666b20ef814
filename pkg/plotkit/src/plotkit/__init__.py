"""Static figure rendering for the solver pipeline's CSV outputs."""

from plotkit.render import FigureSpec, SchemaError, render, render_all

__version__ = "0.1.0"

__all__ = ["FigureSpec", "SchemaError", "render", "render_all", "__version__"]

"""Container-aware knowledge tracing: leak-free features, plans, a numpy autodiff model and trainer."""

__version__ = "0.1.0"

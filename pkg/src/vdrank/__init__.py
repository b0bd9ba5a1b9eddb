"""From-scratch visual-dialog answer ranker on a small numpy autodiff engine."""

__version__ = "0.1.0"

"""Two-stream temporal-static subtraction for unsupervised sequence domain adaptation,
on a small numpy autodiff engine."""

__version__ = "0.1.0"

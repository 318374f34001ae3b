"""Heat kernels with absorbing, reflecting and elastic walls by boundary-layer series, operator series and Feynman-Kac sampling."""

__version__ = "0.1.0"

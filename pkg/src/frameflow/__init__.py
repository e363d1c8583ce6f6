"""Online video-dialogue toolkit: dual-rate encoders, token routers, a
streaming toy language model, and an evaluation harness, all on a small
self-contained float64 autodiff engine."""

__version__ = "0.1.0"

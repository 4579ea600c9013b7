"""latnav: latency-tolerant navigation with slow asynchronous guidance and a
fast learned controller, on a deterministic 2D dynamic-obstacle benchmark.
"""

from .kernels import BACKEND as KERNEL_BACKEND

__all__ = ["KERNEL_BACKEND"]
__version__ = "0.1.0"

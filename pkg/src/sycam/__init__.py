"""sycam: metric-guided synthesis of CAM weight expressions.

Enumerates weight expressions bottom-up over a small grammar, prunes
observationally equivalent candidates on a probe image set, and accepts a
candidate only when it beats the running best on a majority of images with a
strictly better mean, evaluated on nested subsets of increasing size.
"""

__version__ = "0.1.0"

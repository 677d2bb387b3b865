"""Hand-motion tokenization toolkit.

Turns continuous 3D hand-motion sequences into discrete tokens and back,
aligns heterogeneous camera-space recordings into one physical space, and
evaluates generated motions.
"""

__version__ = "0.1.0"

"""
TopoTTA desk toolkit - test-time adaptation for tubular-structure segmentation.

This package provides a small autodiff engine, a UNet-style segmentation
network with directional difference convolutions, pseudo-break hard sample
generation, the two-stage adaptation loop and topology-aware metrics.
"""

__version__ = '0.1.0'

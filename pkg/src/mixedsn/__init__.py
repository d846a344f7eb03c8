"""MixedSN hyperspectral classifier: PCA, patches, 3D/2D ResNeXt network, Adam, metrics."""

__version__ = "0.1.0"

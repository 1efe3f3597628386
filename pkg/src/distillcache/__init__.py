"""Offline distillation toolkit for dense pointmap reconstruction models.

Submodules:

- ``geometry``: point/confidence/mask types, bilinear resampling, thresholding
- ``manifest``: dataset indexing and contiguous N-view sampling
- ``codec``: binary16, RLE masks and the D3RC cache archive
- ``teacher``: teacher dump I/O, synthetic teacher, cache construction
- ``loss``: distillation objective, analytic gradients, finite-difference check
- ``evaluation``: scale factor and median accuracy/completeness
"""

__version__ = "0.1.0"

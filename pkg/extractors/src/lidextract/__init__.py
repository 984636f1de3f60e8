"""Offline batch extractors bridging pretrained (or mock) acoustic models to
the lidlab toolkit's on-disk interchange formats.

This package deliberately does not import lidlab: the two communicate only
through files (frame binaries, token TSVs, matrix containers), so the
classifier side stays free of ML-framework coupling.
"""

__version__ = "0.1.0"

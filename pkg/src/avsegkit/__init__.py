"""Audio-visual segmentation toolkit.

Synthesizes sounding-object segmentation corpora from image annotations and
tagged audio clips (mono panning into stereo from mask geometry), and provides
the numerical core for contrastive audio-visual training: cross-attention
fusion, anchor mining, supervised InfoNCE with analytic gradients, and
segmentation metrics. Everything is numpy, deterministic under explicit seeds.
"""

__version__ = "0.1.0"

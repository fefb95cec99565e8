"""Stereo ranging toolkit for planetary-rover NavCam imagery.

Modules: ``camgeo`` (CAHV geometry and triangulation oracle), ``synthgen``
(synthetic training data), ``tinynet`` (triangulation MLP), ``imageproc``
(PGM I/O and CLAHE), ``features`` (ROI keypoints and mutual matching),
``objpipe`` (per-object ranging), ``recon`` (depth-map point clouds) and
``cli``.
"""

__version__ = "0.1.0"

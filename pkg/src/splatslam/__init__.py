"""splatslam: desk-scale RGB-D SLAM with an anchored neural-Gaussian map."""

__version__ = "0.1.0"

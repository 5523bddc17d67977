"""Desk-scale instance segmentation of synthetic musculoskeletal scenes.

The package trains a small two-stage instance segmenter (pyramid backbone,
region proposals, aligned ROI features, box/class/mask heads) on generated
scenes, and evaluates the results with the quantitative toolbox used for
cartilage and effusion studies: overlap metrics, surface distances,
volumetry, radial thickness maps and scan-rescan precision tables.
"""

__version__ = "0.1.0"

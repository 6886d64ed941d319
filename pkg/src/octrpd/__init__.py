"""Drusen / reticular pseudodrusen detection and quantification on OCT volumes.

The package is organised by pipeline stage:

- :mod:`octrpd.data`       volumes, masks, manifests and their on-disk formats
- :mod:`octrpd.phantom`    synthetic OCT-like volumes with ground truth
- :mod:`octrpd.tinynn`     a small numpy neural-network engine
- :mod:`octrpd.augment`    stochastic training augmentation
- :mod:`octrpd.gates`      ungradable / out-of-distribution / lesion classifiers
- :mod:`octrpd.segmenter`  B-scan lesion segmentation and area quantification
- :mod:`octrpd.metrics`    classification, detection and agreement statistics
- :mod:`octrpd.pipeline`   end-to-end orchestration
"""

__version__ = "0.1.0"

"""Building-damage mapping from bi-temporal Sentinel-1/2 patches.

Pipeline stages: georeference repair -> scene selection -> patch bundles ->
reference classifier training -> prediction/ensembling -> buffered evaluation.
"""

__version__ = "0.1.0"

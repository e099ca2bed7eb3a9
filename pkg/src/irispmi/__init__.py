"""Post-mortem interval (PMI) regression from forensic iris images.

Modules follow the pipeline order: ``manifest`` (dataset records),
``preprocess`` (crops, augmentation), ``protocol`` (split plans and audits),
``balance`` (PMI classes, balancing plans), ``synth`` (synthetic inventory),
``models`` (backbones, fusion head), ``trainer`` and ``evaluate``.
"""

from __future__ import annotations

from .balance import pmi_to_class
from .errors import PipelineError
from .evaluate import mae, rmse

__all__ = ["PipelineError", "mae", "pmi_to_class", "rmse"]
__version__ = "0.1.0"

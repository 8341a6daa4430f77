"""Mask-based blind speech separation with complex spherical Student's t mixtures.

The package estimates time-frequency masks by fitting, independently in each
frequency band, a mixture of heavy-tailed distributions on the complex unit
sphere of normalized multichannel STFT snapshots, then aligns the per-band
component orderings and applies the masks to recover source images.

Main entry points:

- :class:`stmask.pipeline.MaskSeparator` — estimator with the familiar
  ``fit`` / ``get_params`` / ``set_params`` surface.
- :func:`stmask.pipeline.separate` — one-call functional pipeline.
- :mod:`stmask.evaluation` — projection-based SDR and paired significance
  reporting.
- :mod:`stmask.mixgen` — synthetic reverberant mixture datasets.
- ``stmask`` console script — mixture generation, separation, parameter
  sweeps, and evaluation from the command line.
"""

from .pipeline import (
    MaskSeparator,
    SeparationConfig,
    SeparationError,
    SeparationResult,
    separate,
)

__version__ = "0.1.0"

__all__ = [
    "MaskSeparator",
    "SeparationConfig",
    "SeparationError",
    "SeparationResult",
    "__version__",
    "separate",
]

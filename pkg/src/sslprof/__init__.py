"""Self-supervised profiling of multi-channel cell microscopy plates.

Modules:
    dataio       on-disk formats (images, manifests, embedding tables)
    synthgen     synthetic plate/well/site dataset generator
    augment      cell-image augmentations and training view assembly
    encoder      ViT backbone, projection heads, EMA updates, checkpoints
    objective    distillation/patch/spreading losses and teacher centering
    trainer      training loop, schedules, optimiser, embedding extraction
    postprocess  site fusion, well merging, cross-plate alignment
    evaluate     kNN / K-fold / cross-line evaluation and diagnostics
    cli          batch pipeline entry point
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    augment,
    dataio,
    encoder,
    evaluate,
    objective,
    postprocess,
    synthgen,
    trainer,
)

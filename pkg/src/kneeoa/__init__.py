"""Knee OA severity classification workbench.

Pipeline pieces: manifest ingestion and stratified splitting, image
preprocessing/augmentation, inverse-frequency weighted sampling, a uniform
backbone interface, the 30-epoch Adam training protocol with step-decay LR
and best-validation checkpointing, soft-voting and stacked ensembles,
confusion-matrix metrics with multi-run aggregation, and Smooth-GradCAM++
saliency maps.
"""

__version__ = "0.1.0"

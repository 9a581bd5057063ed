"""Multi-task fundus image classifier with quantitative attention validation.

Library layout:

- imaging:    image I/O, bilinear resampling, normalization, stochastic augmentation
- cohort:     manifest parsing, label derivation, subject-level splitting, class weights
- synthgen:   procedural fundus phantom generator with ground-truth anatomy masks
- model:      tiny shared-backbone multi-task CNN with exact manual gradients
- training:   masked weighted BCE, AdamW, cosine schedule, early-stopped training loop
- metrics:    ROC AUC (midrank ties), confusion metrics, reliability bins / ECE
- vesselseg:  classical vessel segmentation (CLAHE, morphology, Otsu)
- explain:    Grad-CAM attention, attention/vessel IoU, region masking experiments
- cli:        end-to-end pipeline commands and report emission
"""

__version__ = "0.1.0"

TASKS = ("hba1c", "kidney", "multi")

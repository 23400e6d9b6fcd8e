"""Weakly supervised cytology slide diagnosis at desk scale.

Pipeline: synthetic corpus generation, supervised cell warm start, semi-weakly
supervised end-to-end fine-tuning of the cell backbone together with an
attention-MIL slide head, color-adversarial robustness fine-tuning, and
image/text description alignment for interpretable cell calls.
"""

__version__ = "0.1.0"

"""
stemedit: instruction-tuned stem editing over residual-VQ audio tokens.

This package contains the codec, the frozen token language model with its
audio and text fusion adapters, the synthetic data pipeline, training,
evaluation and the command-line interface.
"""

__version__ = "1.0.0"

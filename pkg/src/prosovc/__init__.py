"""Prosody-preserving voice conversion on a deterministic synthetic corpus.

The package covers the full pipeline: DSP feature extraction, corpus
synthesis, the conversion model (prosody module, self-attention encoder
with weighted aggregation, autoregressive decoder), alternating
generator/discriminator training, and objective evaluation with report
and figure output.
"""

__version__ = "0.1.0"

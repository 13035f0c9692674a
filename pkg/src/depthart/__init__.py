"""Next-scale autoregressive depth estimation at desk scale.

Two training regimes for a token-map transformer over a multi-scale
residual VQ latent: classic teacher forcing, and dynamic-target
refinement where the model's own greedy predictions become the inputs
and quantized residuals against the encoded ground truth become the
targets.
"""

__version__ = "0.1.0"

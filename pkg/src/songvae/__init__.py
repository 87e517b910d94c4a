"""FLN-conditioned hierarchical VAE/GAN for single-track melody generation.

Modules: ``corpus`` (MIDI to piano-roll phrases), ``fln`` (first/last-note
classes), ``lcvae`` (phrase model), ``hcvae`` (song model), ``hcgan``
(adversarial fine-tuning), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"

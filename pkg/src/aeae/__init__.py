"""Adversarial example detection with an autoencoder and an isolation forest.

The package is layered bottom-up: :mod:`aeae.tensor` (autodiff),
:mod:`aeae.models` (autoencoder and classifier), :mod:`aeae.attacks`,
:mod:`aeae.iforest`, :mod:`aeae.detector`, and the :mod:`aeae.cli` front end.
The detector never imports the attack module.
"""

__version__ = "0.1.0"

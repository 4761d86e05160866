"""Joint training of a convolutional and a transformer image classifier.

The package couples two small backbones through a pair learning module:
a contrastive term aligns their embedding spaces and a distillation term
aligns their predictions, with gradient routing that restricts which
branch each term may update. Training proceeds through a three-stage
schedule that switches the active pair losses by epoch.
"""

__version__ = "0.1.0"

from . import tensor  # noqa: F401

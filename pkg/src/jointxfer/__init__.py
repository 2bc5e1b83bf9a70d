"""Joint cross-domain learning for emotion recognition, in numpy.

A shared convolutional encoder is trained on two datasets at once with one
classification head per dataset plus a contrastive matching term on pairs of
features drawn across the datasets.
"""

__version__ = "0.1.0"

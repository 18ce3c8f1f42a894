"""Frame-level speaker features from a convolutional/time-delay net, trained
either jointly with a parametric classifier or with full-info training, where
the classifier is replaced by length-normalised speaker centroids."""

__version__ = "0.1.0"

"""patchcorr: patch-wise correspondence learning for cross-camera matching."""

__version__ = "0.1.0"

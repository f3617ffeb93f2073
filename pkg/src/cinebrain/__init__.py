"""Movie-to-fMRI encoder and fMRI-to-frame decoder with a synthetic ground-truth cortex."""

__version__ = "0.1.0"

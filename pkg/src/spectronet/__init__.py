"""Self-supervised signal/noise disentanglement for spectroscopy."""
__version__ = "0.1.0"

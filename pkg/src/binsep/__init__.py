"""Binaural speech separation with MIMO TasNet variants."""

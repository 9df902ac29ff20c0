"""Instruction-conditioned hypernetworks that emit adapters and prefixes for a small encoder-decoder."""

"""Desk-scale frame-level encoder/decoder with frame-driven attention."""

"""Desk-scale laboratory for causal single-channel speech enhancement with
teacher-guided training objectives."""

__version__ = "0.1.0"

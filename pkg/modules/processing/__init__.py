"""Concurrent per-item processing used by evaluation and tokenization."""

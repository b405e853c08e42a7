"""Residual-VQ audio tokenizer."""

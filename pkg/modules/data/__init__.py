"""Synthetic stems, edit triplets and tokenized datasets."""

"""Base token language model, fusion adapters and the fused editor."""

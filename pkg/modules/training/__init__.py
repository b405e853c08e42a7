"""Base pretraining, adapter finetuning, checkpoints and gradient checks."""

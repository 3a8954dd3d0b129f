"""Neural spectrum tokenizer, masked EEG pre-training and fine-tuning at desk scale."""

__version__ = "0.1.0"

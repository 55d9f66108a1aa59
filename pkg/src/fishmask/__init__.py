"""Fisher-induced sparse unchanging masks for training, communication and checkpointing."""

__version__ = "0.1.0"

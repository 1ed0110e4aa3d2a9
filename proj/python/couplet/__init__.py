"""Chinese couplet generation: corpus tools, fused embeddings, transformer training and decoding."""

from ._couplet import (
    Checkpoint,
    DataError,
    Error,
    UsageError,
    Vocab,
    bleu,
    cross_entropy_loss,
    load_couplets,
    main,
    positional_encoding,
    systems,
    train,
)

__all__ = [
    "Checkpoint",
    "DataError",
    "Error",
    "UsageError",
    "Vocab",
    "bleu",
    "cross_entropy_loss",
    "load_couplets",
    "main",
    "positional_encoding",
    "systems",
    "train",
]

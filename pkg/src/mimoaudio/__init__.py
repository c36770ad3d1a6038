"""Toy-scale audio tokenizer, delay-pattern codec and patch-level interleaved text/audio LM."""
from . import dsp, framing, ganloss, rvq, tokenfile, tokenizer

__version__ = "0.1.0"

__all__ = ["dsp", "framing", "ganloss", "rvq", "tokenfile", "tokenizer", "__version__"]

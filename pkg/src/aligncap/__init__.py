"""Speech emotion captioning over a joint text/speech-token codebook.

A small numpy transformer stands in for the language model. Speech tokens are
aligned to text prompts by distillation into a LoRA adapter, then the adapter
is tuned on preference pairs.
"""

__version__ = "0.1.0"

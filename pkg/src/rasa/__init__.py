"""Report-auxiliary self-distillation for survival prediction from feature bags."""

__version__ = "0.1.0"

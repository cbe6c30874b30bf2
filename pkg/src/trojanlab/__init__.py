"""Instance-level multimodal Trojan attacks on a desk-scale VQA classifier."""

__version__ = "0.1.0"

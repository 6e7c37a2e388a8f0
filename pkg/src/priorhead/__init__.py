"""Prior-guided one-shot face video synthesis at desk scale."""

__version__ = "0.1.0"

"""In-ear ANC - fixed feedforward controller design for in-ear headphones."""

__version__ = "0.1.0"

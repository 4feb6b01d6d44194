"""Small-cost asymptotics for exponential-utility investors: no-trade bands,
welfare losses, indifference prices and shadow-price diagnostics."""

__version__ = "0.1.0"

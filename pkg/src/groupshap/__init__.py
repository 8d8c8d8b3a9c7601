"""Group-level Shapley attribution for news-augmented GRU price forecasting."""

__version__ = "0.1.0"

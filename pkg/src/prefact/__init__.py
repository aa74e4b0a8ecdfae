"""Low-rank pre-factorized training for CNNs, LSTMs and Transformers."""
from prefact._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]

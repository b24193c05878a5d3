from .model import ConversionModel

__all__ = ["ConversionModel"]

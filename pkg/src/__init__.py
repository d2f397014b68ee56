# Swin Transformer toolkit for lung CT slices
__version__ = "1.0.0"

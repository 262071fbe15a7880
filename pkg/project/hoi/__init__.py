"""
Hand-object interaction motion tokenization and motion-language modeling.
"""

__version__ = '1.0.0'

"""
Production settings: full-length training regime and quieter logging.
"""

from .base import *

DEBUG = False

HOI_DEFAULTS['tokenizer']['epochs'] = 2000

LOGGING['handlers']['console']['level'] = 'WARNING'

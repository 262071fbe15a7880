"""
Development settings for the HOI motion-language toolkit.
"""

from .base import *
from decouple import config

DEBUG = True

# Development logging - more verbose
if 'LOGGING' in locals() and LOGGING:
    try:
        LOGGING['handlers']['console']['level'] = config('HOI_CONSOLE_LEVEL', default='INFO')
        LOGGING['loggers']['hoi.services']['level'] = config('HOI_LOG_LEVEL', default='DEBUG')
    except KeyError:
        pass

"""
Test package for the HOI motion-language toolkit.
"""

"""
Test package for Clean Codes.
"""

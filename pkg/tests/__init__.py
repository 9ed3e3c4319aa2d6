"""
Test configuration for django_inverse_rt
"""

"""Tests for django_inverse_rt."""

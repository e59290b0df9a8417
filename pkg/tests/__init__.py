"""Tests for the conic-claims package."""

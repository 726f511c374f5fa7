"""Tests for orchard-seg."""

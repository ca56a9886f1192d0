"""Tests for tool modules."""

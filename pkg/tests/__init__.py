"""Test suite for feeder-stgnn."""

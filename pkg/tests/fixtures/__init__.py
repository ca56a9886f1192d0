"""Static test data for feeder-stgnn tests."""

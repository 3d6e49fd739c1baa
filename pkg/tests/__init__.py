"""Test suite for the 3 Things Finance Newsletter Bot."""

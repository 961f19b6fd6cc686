"""
Tests for the protomargin package.
"""

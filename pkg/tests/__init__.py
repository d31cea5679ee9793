"""Tests for sgdfuse."""

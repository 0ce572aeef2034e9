"""Tests for critcascade."""

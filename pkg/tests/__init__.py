"""Tests for the latgas lattice gas toolkit."""

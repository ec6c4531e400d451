"""Embedded observation lakehouse."""

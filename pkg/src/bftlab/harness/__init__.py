"""Scenario runner, safety check, metrics and CLI."""

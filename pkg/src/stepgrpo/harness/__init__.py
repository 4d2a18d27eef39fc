"""Configuration, CLI, metrics files and the verification suite."""

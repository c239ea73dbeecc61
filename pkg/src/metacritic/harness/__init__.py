"""Configuration, experiment workflows and the command-line interface."""

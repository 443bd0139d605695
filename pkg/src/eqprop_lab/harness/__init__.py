"""Configuration, datasets, training and the command-line interface."""

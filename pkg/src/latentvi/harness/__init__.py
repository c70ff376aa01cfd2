"""Command-line harness: configs, datasets, persistence, training runs and verification."""

"""Command-line entrypoint helpers"""

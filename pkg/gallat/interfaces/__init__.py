"""Interface definitions for gallat commands."""

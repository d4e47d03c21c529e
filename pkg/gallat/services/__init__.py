"""Service layer for gallat."""

"""Hierarchical whole-body quadrotor planning."""

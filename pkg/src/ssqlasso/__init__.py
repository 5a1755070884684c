"""Spike-and-slab quantile LASSO."""

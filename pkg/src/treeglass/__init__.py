"""Glauber dynamics of the Ising model on b-ary trees: exact analysis and simulation."""

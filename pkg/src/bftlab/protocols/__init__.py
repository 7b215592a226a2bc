"""Replica automata for the permissioned protocols."""

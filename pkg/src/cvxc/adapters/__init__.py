"""Solver adapters speaking the ``{input} {output}`` file protocol.

Each adapter is a runnable module: it reads a CBF file and writes a solution
file (``STATUS <token>`` then ``VAR <index> <value>`` lines).
"""

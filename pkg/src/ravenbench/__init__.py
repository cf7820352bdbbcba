"""ravenbench: benchmark in-painting substrates on Raven-style matrix puzzles.

The toolkit generates synthetic 3x3 matrix-completion puzzles, asks a
pluggable in-painting substrate to fill the masked answer cell, scores the
fill against the eight answer options with a five-metric similarity vote,
and characterises each substrate with psychometric fits and error-pattern
statistics.
"""

__version__ = "0.1.0"

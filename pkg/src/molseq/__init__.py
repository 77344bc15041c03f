"""Graph-free molecular transformer toolkit.

Tokenizes molecular frames into dual discrete/continuous sequences, trains
plain transformers on energies and forces, and evaluates them with attention
analytics, scaling-law fits, and molecular dynamics.
"""

__version__ = "0.1.0"

"""CPU-core migration control for a tiered storage system with interpretable policies.

A recurrent actor-critic policy learns when to move CPU cores between the
NORMAL, KV and RV levels of a storage pipeline. Quantized bottleneck
autoencoders then turn the policy into a finite state machine that can be
inspected state by state.
"""

__version__ = "0.1.0"

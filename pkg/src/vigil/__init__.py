"""Edge-resident IT support agent runtime.

Subpackages cover policy-gated command execution, a simulated host and
diagnostic tool registry, embedding-backed knowledge retrieval, the
session engine, durable trace storage with fleet sync, an evaluation
harness, and HTTP/CLI front ends.
"""

__version__ = "0.1.0"

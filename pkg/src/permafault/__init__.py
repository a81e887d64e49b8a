"""Permanent-fault characterization for a SIMT GPU model.

Stuck-at faults are simulated on bit-level models of the warp scheduler,
fetch and decode units, classified into instruction-level error models, and
those error models are injected into workloads running on a fast
instruction-level simulator.
"""

from __future__ import annotations

__version__ = "0.1.0"

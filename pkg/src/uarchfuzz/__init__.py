"""RL-driven search for transient-execution leaks in x86 instruction sequences.

The package splits into: an instruction catalog feeding a hierarchical
action space, measurement backends (a deterministic simulator and a
hardware harness runner), a leak-verification protocol, a from-scratch
PPO trainer, analytics over episode logs, and a small HTTP service with
a thin CLI in front of it.
"""

__version__ = "0.1.0"

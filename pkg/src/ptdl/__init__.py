"""Desk-scale simulator for private, trustable decentralized learning.

Agents train locally with DP-SGD, pass parameters along a topology, and a
ledger-backed coordinator accepts or rejects each update by peer median.
"""

__version__ = "0.1.0"

"""Decentralized route selection for traffic simulations.

Modules: ``network`` (road graphs), ``routing`` (three shortest-path
routers), ``plans`` (utilization vectors and mined costs), ``collective``
(tree-based plan selection), ``mesosim`` (queue-based traffic simulator),
``demand`` (trip generation), ``experiment`` (sweeps and reporting).
"""

__version__ = "0.1.0"

"""Plant orchestration engine for a maple-syrup boiling center.

Routes inbound lots over dynamically-assigned silos, arbitrates the five
shared transfer lines through a central interlock, runs the delivery /
RO / evaporator-feed / permeate-balancing routines as state machines,
rinses every sugar-bearing path after use, and records everything in an
append-only, replayable trace log. A fixed-step plant simulator stands in
for the physical hardware behind the same device-command abstraction.
"""

__version__ = "0.1.0"

SCHEMA_VERSION = 1

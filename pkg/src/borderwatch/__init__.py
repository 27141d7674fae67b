"""Border intrusion detection pipeline, hardware-free.

Simulated IR sensor nodes detect crossings and report to a relay server
over a newline-delimited JSON protocol; the server persists events,
fans notifications out to operator sessions, and routes alarm commands
back down to devices.
"""

__version__ = "0.1.0"

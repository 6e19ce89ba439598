"""tuhr: smart-waste fleet operations server.

Ingests bin-sensor telemetry over a newline-delimited TCP protocol, tracks
fill levels and gas readings through an event-sourced store, raises
edge-triggered alerts, assigns full bins to workers at minimum total travel
distance and serves the live system over an HTTP API with server-sent events.
"""

__version__ = "0.1.0"

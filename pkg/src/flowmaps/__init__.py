"""FlowMaps: flow matching over future object locations."""

__version__ = "0.1.0"

"""tomobench: fan-beam CT reconstruction toolbox and benchmark harness."""

__version__ = "0.1.0"

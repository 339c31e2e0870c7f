"""Cross-network asset transfer gateways with crash recovery and offline audit."""

import logging

__version__ = "0.1.0"

logging.getLogger(__name__).addHandler(logging.NullHandler())

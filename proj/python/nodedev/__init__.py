"""Offload runtime over worker processes.

The heavy lifting lives in the compiled ``_core`` module. ``Cluster`` starts
worker processes from the ``nodedev-bench`` executable, which is installed
next to this package or located through the NODEDEV_BENCH variable.
"""

import os
import shutil
from pathlib import Path

from ._core import (
    FRAME_HEADER_SIZE,
    PROTOCOL_VERSION,
    BootstrapError,
    ConfigError,
    DeviceError,
    EndOfStream,
    Error,
    KernelTableDivergence,
    LookupError,
    OffloadError,
    ProtocolError,
    TransportError,
    balanced_shares,
    ceil_shares,
    decode_frame,
    encode_frame,
    fib_frontier,
    kerneltable_digest,
    parse_config,
)
from ._core import Cluster as _Cluster

__all__ = [
    "FRAME_HEADER_SIZE",
    "PROTOCOL_VERSION",
    "BootstrapError",
    "Cluster",
    "ConfigError",
    "DeviceError",
    "EndOfStream",
    "Error",
    "KernelTableDivergence",
    "LookupError",
    "OffloadError",
    "ProtocolError",
    "TransportError",
    "balanced_shares",
    "ceil_shares",
    "decode_frame",
    "encode_frame",
    "fib_frontier",
    "kerneltable_digest",
    "parse_config",
    "worker_executable",
]


def worker_executable():
    """Path of the nodedev-bench binary used as the worker."""
    env = os.environ.get("NODEDEV_BENCH")
    if env:
        return env
    bundled = Path(__file__).with_name("nodedev-bench")
    if bundled.exists():
        return str(bundled)
    found = shutil.which("nodedev-bench")
    if found:
        return found
    raise FileNotFoundError("nodedev-bench not found; set NODEDEV_BENCH")


class Cluster(_Cluster):
    """Local worker devices 1..workers plus the host as device 0."""

    def __init__(self, workers, threads=None, timeout=0.0, worker_executable=None):
        exe = worker_executable or globals()["worker_executable"]()
        super().__init__(workers, exe, threads, timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
        return False

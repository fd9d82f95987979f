"""Archive node: ARCP wire protocol, gossip, sealing, simulation and TCP runtime."""

from .bench import BenchRow, batch_bench, format_report
from .config import NodeConfig, load_key_values, parse_key_values
from .core import Node, Receipt
from .net import NodeServer, fetch_remote, run_node, submit_remote
from .sim import PartitionOutcome, SimClock, SimNetwork, Simulation, partition_scenario
from .wire import FrameDecoder, Kind, WireMessage, decode_frames, encode_frame

__all__ = [
    "BenchRow", "FrameDecoder", "Kind", "Node", "NodeConfig", "NodeServer", "PartitionOutcome", "Receipt",
    "SimClock", "SimNetwork", "Simulation", "WireMessage", "batch_bench", "decode_frames", "encode_frame",
    "fetch_remote", "format_report", "load_key_values", "parse_key_values", "partition_scenario", "run_node",
    "submit_remote",
]

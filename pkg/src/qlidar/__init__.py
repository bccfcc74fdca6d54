"""Quantum-correlation LiDAR: SPAD frame simulation, photon-coincidence
imaging and dual-profile ranging robust to classical spoofing."""

from .adaptive import NoQuantumSignal, SearchParams, correlation_driven_search, probe_cost_model
from .config import ConfigError, ScenarioConfig, load_config
from .core import FrameStack, GateSchedule, GateWindow, HotPixelMask, time_to_depth
from .correlation import gamma_antidiag, gamma_plus, jpd_bruteforce, peak_stats, remove_crosstalk
from .io import read_frame_stack, write_frame_stack
from .ranging import EdgeFit, NoEdgeFound, PipelineParams, analyze_scan, fit_erf_edge
from .runner import run_adaptive, run_scenario
from .sim import Scene, acquire_stack, simulate_linear_scan

__version__ = "0.1.0"

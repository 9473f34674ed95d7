"""Multicell MIMO simulator for distributed coordinated beamforming trained
by iterative forward-backward over-the-air pilot signaling."""

from .beamforming import (BeamformerState, initial_state, mmse_receiver,
                          per_stream_rates, precoder_update,
                          stream_mse_and_weight, sum_rate,
                          uncoordinated_baseline, wmmse_centralized)
from .channel import (ChannelSet, calibrate_noise, cell_edge_channelset,
                      generate_channels, pathloss)
from .metrics import (effective_throughput, frame_budget, pilot_overhead,
                      sweep_iterations)
from .pilots import (EffectiveCsi, PilotPlan, allocate_pilots,
                     direct_filter_estimate, observe_backward,
                     observe_forward)
from .protocol import (FbTrace, Scenario, assign_duplex_modes,
                       pilots_per_round, run_dynamic_tdd, run_scenario,
                       run_strategy_a, run_strategy_b, run_strategy_c,
                       run_strategy_d, uncoordinated_state)
from .topology import (NetworkTopology, drop_users, generate_cell_edge_pair,
                       generate_hex_grid, wrap_distance)

__version__ = "0.1.0"

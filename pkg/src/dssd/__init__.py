"""Distributed speculative decoding (DSD) and its split-verification variant (DSSD)."""
from .core import RngStream, Role, RoundRng, VocabConfig, ZeroMass, normalize, sample, top_k_filter
from .kernel import (InvalidDraftProb, VerifyOutcome, accept_prob, accept_test, first_token_law,
                     reference_decode, residual, verify_round)
from .latency import (TimingParams, expected_tokens_per_round, predicted_speedup, t_comm_bounds,
                      t_comm_dsd, t_comm_dssd_expected, t_inf_dsd, t_inf_dssd, table1)
from .models import (CalibratedPairConfig, CalibrationInfeasible, ContextModel, TableModel,
                     calibrated_pair, measure_alpha, table_model)
from .protocol import (DesyncError, DownlinkDist, DownlinkToken, EndpointState, MalformedFrame,
                       Mode, UplinkDsd, UplinkDssd, decode, encode, payload_bits)
from .transport import LinkConfig, SessionTranscript, VirtualClock, run_session, sim_transmit

__version__ = "0.1.0"

from .build import (
    HmmTopology, build_denominator, compile_numerator, compose_lm_topology, lm_logprob,
    restrict_to_span, train_phone_lm, chunk_denominator,
)
from .search import Posteriors, enumerate_paths, forward_backward, path_scores, total_log_prob, viterbi
from .wfsa import EPS, EmptyCompositionError, GraphError, Wfsa, intersect, remove_epsilons, trim

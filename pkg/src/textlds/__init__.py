"""Linear dynamical system learning for text.

Learns a Gaussian linear dynamical system over one-hot token observations
from aggregate co-occurrence statistics (subspace identification followed by
moment-driven EM), performs steady-state Kalman filtering and smoothing to
produce context-dependent token embeddings, evaluates corpus likelihood, and
exports linear-RNN initialization parameters.
"""

__version__ = "0.1.0"

from textlds.corpus import (
    CooccurrenceStats,
    LagCovariance,
    Vocabulary,
    accumulate_counts,
    apply_pseudocounts,
    build_vocab,
    lag_covariance,
    load_counts,
    merge_stats,
    save_counts,
    whiten_stats,
)
from textlds.em import SecondOrderStats, EmTrace, asos_estep, em_run, exact_estep, mstep
from textlds.inference import (
    EmbeddingContext,
    RnnInit,
    TokenEmbeddingSequence,
    embed_corpus,
    exact_filter_smooth,
    export_rnn_init,
    filter_sentence,
    load_rnn_init,
    save_rnn_init,
    smooth_sentence,
    transition_singular_pairs,
)
from textlds.linalg import (
    LinearOperator,
    StructuredMatrix,
    randomized_svd,
    trace_product,
    trace_woodbury_inverse,
    trace_woodbury_product,
    woodbury_logdet,
    woodbury_solve,
)
from textlds.model import LdsParams, load_model, save_model
from textlds.ssid import (
    SsidIntermediate,
    build_hankel_operator,
    factor_hankel,
    psd_correct_D,
    recover_A,
    recover_C,
    recover_D,
    solve_lyapunov,
    ssid_from_covariances,
    ssid_pipeline,
)
from textlds.steady import (
    SteadyState,
    compute_gain,
    precompute_gain_columns,
    solve_posterior_steady_state,
    steady_log_likelihood,
)
from textlds.synth import (
    GroundTruthSystem,
    empirical_lag_covariances,
    random_ground_truth,
    sample_hmm_text,
    sample_lds,
)

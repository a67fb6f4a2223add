from ._painvrl import (
    ConfigError,
    adjusted_rand_index,
    check_descent,
    combined_direction,
    degree_coeff,
    echo_config,
    gradcheck,
    irm_penalty_from_gradients,
    make_synthetic,
    metrics_at_k,
    oracle_min_norm,
    rank_topk,
    run,
    solve_weights,
    to_invariant,
    to_variant,
)

__all__ = [
    "ConfigError",
    "adjusted_rand_index",
    "check_descent",
    "combined_direction",
    "degree_coeff",
    "echo_config",
    "gradcheck",
    "irm_penalty_from_gradients",
    "make_synthetic",
    "metrics_at_k",
    "oracle_min_norm",
    "rank_topk",
    "run",
    "solve_weights",
    "to_invariant",
    "to_variant",
]

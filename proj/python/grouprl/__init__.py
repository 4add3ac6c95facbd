"""Python surface for the grouprl engine.

The heavy lifting lives in the C++ core; this package re-exports the bound
operations (training loop, group advantages, gate arithmetic, metrics IO).
"""

from grouprl._core import (  # noqa: F401
    clipped_term,
    failure_rate,
    grad_check,
    group_advantages,
    importance_ratio,
    kl_penalty_term,
    read_metrics,
    strip_meta_tokens,
    train,
    train_text,
)

__all__ = [
    "clipped_term",
    "failure_rate",
    "grad_check",
    "group_advantages",
    "importance_ratio",
    "kl_penalty_term",
    "read_metrics",
    "strip_meta_tokens",
    "train",
    "train_text",
]

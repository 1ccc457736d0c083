from ._core import (
    cfg_combine,
    count_trainable_params_embedding,
    count_trainable_params_full_attn,
    count_trainable_params_lora,
    run_cli,
)

__all__ = [
    "cfg_combine",
    "count_trainable_params_embedding",
    "count_trainable_params_full_attn",
    "count_trainable_params_lora",
    "run_cli",
]

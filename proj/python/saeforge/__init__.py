from ._saeforge import (
    CheckpointError,
    bootstrap_mean_ci,
    decode,
    encode,
    identity_sae,
    init_sae,
    load_sae,
    lr_schedule,
    pca,
    run_cli,
    save_sae,
    sparsity_phi,
    within_sae_similarity,
)

__all__ = [
    "CheckpointError",
    "bootstrap_mean_ci",
    "decode",
    "encode",
    "identity_sae",
    "init_sae",
    "load_sae",
    "lr_schedule",
    "pca",
    "run_cli",
    "save_sae",
    "sparsity_phi",
    "within_sae_similarity",
]

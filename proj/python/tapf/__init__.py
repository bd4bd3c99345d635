"""Audio tokenizer laboratory bindings.

Thin re-export of the compiled core: synthetic audio-visual pairs, config
handling, training runs, residual quantization, and evaluation metrics.
"""

from ._core import (
    TapfError,
    canonicalize_config,
    default_config,
    generate_pair,
    git_blob_sha1,
    probe_accuracy,
    rvq_quantize,
    si_sdr,
    train_run,
)

__all__ = [
    "TapfError",
    "canonicalize_config",
    "default_config",
    "generate_pair",
    "git_blob_sha1",
    "probe_accuracy",
    "rvq_quantize",
    "si_sdr",
    "train_run",
]

"""Training-free suppression of hallucination modes by spectral filtering
of FFN down-projection weights."""

from .covariance import (
    CovarianceAccumulator,
    FeatureMatrix,
    HallucinationCovariance,
    MeanDifference,
    difference_set,
    hallucination_covariance,
    mean_difference,
    pool_tokens,
)
from .spectral import (
    DEFAULT_ETA,
    PRESETS,
    FilterConfig,
    SpectralDecomposition,
    SuppressionOperator,
    apply_spectral_function,
    damping,
    eigendecompose,
    hard_projection,
    identity_operator,
    mean_shift_operator,
    select_alpha,
    suppression_operator,
    svd_modes,
    svd_operator,
    transformed_spectrum,
)
from .tensorstore import (
    CheckpointHandle,
    Tensor,
    open_safetensors,
    read_npy,
    read_npz,
    read_tensor,
    write_npy,
    write_npz,
    write_safetensors,
)
from .weightedit import EditReport, LayerSelection, correct_weight, edit_checkpoint, resolve_layers, verify_edit

__version__ = "0.1.0"

"""Subspace optimizers for matrix parameters.

Low-rank (SVD, random Stiefel, Gaussian) and sparse (top-k, random-k)
gradient projections driving MSGD or AdamW, stochastic oracles including
constructions on which SVD-based projection provably stalls, theory-derived
hyperparameters, and a reproducible experiment harness.
"""

from .errors import (
    ConfigError,
    DegenerateInput,
    HorizonTooShort,
    InvalidConstruction,
    InvalidInput,
    InvalidMetric,
    InvalidRank,
    LemmaViolation,
    LoreOptError,
    NumericalDivergence,
    OracleContractViolation,
    ShapeError,
)
from .linalg import RandomSource, gaussian_matrix, orthonormalize, read_matrix, svd_full, write_matrix
from .optimizers import (
    GradMode,
    LayerSpec,
    ModelState,
    OptConfig,
    Optimizer,
    ReLoRAModel,
    Schedule,
    Trajectory,
    load_checkpoint,
    make_model,
    relora_train_step,
    run,
    save_checkpoint,
    train_step,
)
from .oracles import (
    ORACLES,
    GradientOracle,
    QuadraticCE,
    RandomQuadratic,
    SparseTrap,
    SvdTrap,
    build_oracle,
    verify_oracle,
)
from .projectors import (
    LowRankProjector,
    ProjectorKind,
    Side,
    SparseMask,
    fit_svd_projector,
    lift,
    project,
    sample_gaussian_projector,
    sample_rand_mask,
    sample_uniform_stiefel,
    topk_mask,
    transport,
)
from .theory import (
    HparamBundle,
    ProblemConstants,
    cost_model,
    hparams_deterministic,
    hparams_golore,
    hparams_largebatch,
    verify_lemma_suite,
)

__version__ = "0.1.0"

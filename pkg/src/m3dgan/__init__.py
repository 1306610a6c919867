"""Multi-modal multi-domain translation GAN, in pure numpy.

Modality prenets feed a shared computing body; a reference encoder plus a
small global token bank turn any target-distribution sample into a
structured latent style code; generation runs either reference-conditioned
or from prior draws.  Training combines adversarial, reconstruction,
KL-to-prior and latent-regression terms with an output/latent distance
regulariser that fights mode collapse.
"""

from .datamodel import (
    ContractError,
    LatentCode,
    LatentOrigin,
    LossWeights,
    Modality,
    ModelConfig,
    PairedExample,
    ReferencePolicy,
    Sample,
    TaskSpec,
    desk,
    load_config,
    lookup_task,
    micro,
    paper_faithful,
    save_config,
    task_registry,
    validate_config,
)

__all__ = [
    "ContractError",
    "LatentCode",
    "LatentOrigin",
    "LossWeights",
    "Modality",
    "ModelConfig",
    "PairedExample",
    "ReferencePolicy",
    "Sample",
    "TaskSpec",
    "desk",
    "load_config",
    "lookup_task",
    "micro",
    "paper_faithful",
    "save_config",
    "task_registry",
    "validate_config",
]

__version__ = "0.1.0"

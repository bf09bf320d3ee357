"""Training-free transfer of low-rank adapters between model checkpoints.

An adapter delta trained on a source weight is split into the part living in
the source weight's column/row spaces and the part living in their
nullspaces; each part is then projected into the corresponding spaces of the
target weight.
"""

from .archive import (
    AdapterModule,
    AdapterSet,
    Checkpoint,
    SpectralCache,
    TensorArchive,
    load_adapter,
    load_archive,
    save_adapter,
    save_archive,
    spectral_cache_get_or_compute,
)
from .decompose import DecomposedDelta, decompose_adapter
from .diagnostics import ModuleResult, TransferReport, build_report, emit, pearson
from .errors import (
    DegenerateSubspace,
    EmptyModel,
    EmptyReport,
    FormatError,
    InvalidMatrix,
    IoError,
    NumericalFailure,
    ProLoRAError,
    RankError,
    ShapeError,
    SizeError,
    SpecError,
)
from .linalg import (
    SpectralBases,
    numerical_rank,
    project_onto,
    spectral_bases,
    split_bases,
    svd_full,
    truncated_svd,
)
from .similarity import ModulePairing, SimilarityScore, module_similarity, pair_modules, subspace_similarity
from .synth import SynthSpec, generate_adapter, generate_model_pair
from .transfer import (
    TransferMode,
    TransferredDelta,
    copy_transfer,
    flatten_conv,
    recompress,
    transfer_adapter,
    transfer_factorwise,
    transfer_mismatched,
    unflatten_conv,
)

__version__ = "0.1.0"

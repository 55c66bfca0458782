"""hemogen: synthetic blood-cell instance mask generation and evaluation."""

from .maskdb import (
    CellShape,
    DatasetStats,
    InstanceMask,
    MaskValidationError,
    DatabaseFormatError,
    ShapeDatabase,
    build_database,
    compute_stats,
    extract_cells,
    extract_regions,
    load_db,
    load_mask,
    save_db,
    save_mask_png,
)
from .probmap import ExcitationPatch, ProbabilityMap, SamplerParams, excitation, excitation_value
from .synth import (
    AugmentationConfig,
    PlacedCell,
    SynthesisConfig,
    SynthesisRecord,
    batch_generate,
    generate_mask,
    sample_cell_count,
    sample_shape,
)
from .metrics import (
    AdhesionStats,
    BinaryMask,
    Detection,
    InstanceExtraction,
    adhesion_stats,
    dice,
    extract_instances,
    match_and_ap,
)

__version__ = "0.1.0"

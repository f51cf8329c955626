from flsim.data.dataset import Dataset, LabeledExample, concat
from flsim.data.loaders import load_csv, load_idx, write_idx
from flsim.data.transforms import (
    Partition,
    Rounding,
    augment_gaussian,
    default_noise_sigma,
    dirichlet_partition,
    flip_dynamic,
    flip_static,
    static_flip_labels,
    synth_mixture,
)

__all__ = [
    "Dataset", "LabeledExample", "Partition", "Rounding", "augment_gaussian", "concat",
    "default_noise_sigma", "dirichlet_partition", "flip_dynamic", "flip_static", "load_csv",
    "load_idx", "static_flip_labels", "synth_mixture", "write_idx",
]

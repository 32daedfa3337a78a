"""Multiscale convolutional dictionaries trained by unrolled shrinkage.

The package builds U-Net-shaped synthesis dictionaries (transposed
convolutions with skip codes at every scale), runs ISTA-style sparse coding
through them, and trains the whole unrolled pipeline end to end on imaging
tasks with hand-written exact gradients. See the README for the CLI.

Submodules load lazily so the CLI can pin thread counts before numpy is
imported; ``from musc import forward`` still works as usual.
"""

import importlib

__version__ = "0.1.0"

# public name -> owning submodule
_EXPORTS = {
    "SampleSet": "data",
    "TaskSpec": "data",
    "gen_corpus": "data",
    "load_corpus": "data",
    "nmse": "data",
    "psnr": "data",
    "psnr_fr": "data",
    "save_corpus": "data",
    "DictionaryParams": "linops",
    "MultiscaleCode": "linops",
    "ScaleSpec": "linops",
    "conv_mimo": "linops",
    "conv_siso": "linops",
    "dict_adjoint": "linops",
    "dict_apply": "linops",
    "materialize": "linops",
    "tconv_mimo": "linops",
    "tconv_siso": "linops",
    "up_block": "linops",
    "AdamState": "model",
    "Gradients": "model",
    "ModelParams": "model",
    "adam_step": "model",
    "backward": "model",
    "forward": "model",
    "init_model": "model",
    "load_checkpoint": "model",
    "loss": "model",
    "save_checkpoint": "model",
    "IndicatorCode": "probe",
    "SparsityReport": "probe",
    "atom_grid": "probe",
    "extract_atom": "probe",
    "sparsity_profile": "probe",
    "DegenerateOperatorError": "sparse",
    "ShrinkMode": "sparse",
    "Thresholds": "sparse",
    "ista_k": "sparse",
    "lasso_objective": "sparse",
    "lista_k": "sparse",
    "oracle_lasso": "sparse",
    "power_iteration": "sparse",
    "shrink_step": "sparse",
    "NtfFormatError": "tensor",
    "dot": "tensor",
    "export_pgm": "tensor",
    "kron": "tensor",
    "read_ntf": "tensor",
    "write_ntf": "tensor",
    "TrainConfig": "training",
    "TrainResult": "training",
    "train_loop": "training",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    try:
        owner = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}") from None
    value = getattr(importlib.import_module(f".{owner}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))

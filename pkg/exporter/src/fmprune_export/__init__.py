"""Torch checkpoint converter for the fmprune model directory format."""

__version__ = "0.1.0"

from .export import ExportError, ParityError, export, parity_diff, write_model_dir
from .torch_zoo import ARCHITECTURES, SpecNet, arch_spec, make_fixture, save_fixture

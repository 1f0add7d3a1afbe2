"""Export pretrained-encoder features into FPK1 feature packs.

The extractor is a pure exporter: it never computes any classification
math, keeping the pack byte format the only contract with consumers.
"""

from .backends import BACKENDS, ClipBackend, ToyPatchBackend
from .errors import (
    ClassWithFewerThanNImages,
    EmptyDataset,
    ExtractorError,
    MissingWeights,
)
from .fpk_writer import PackPayload, pack_bytes, write_pack
from .job import ExtractJob, extract

__version__ = "0.1.0"

__all__ = [
    "BACKENDS",
    "ClassWithFewerThanNImages",
    "ClipBackend",
    "EmptyDataset",
    "ExtractJob",
    "ExtractorError",
    "MissingWeights",
    "PackPayload",
    "ToyPatchBackend",
    "extract",
    "pack_bytes",
    "write_pack",
]

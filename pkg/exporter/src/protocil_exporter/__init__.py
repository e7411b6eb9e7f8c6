"""Frozen-encoder image embedding exporter for the protocil toolchain.

Loads a pre-trained image encoder, runs inference (never training) over an
image-folder dataset, and writes the embeddings as a FEATSET file plus a
provenance manifest. The encoder stays fixed; only its outputs leave.
"""

__version__ = "0.1.0"

from .exporter import ExportError, ExportManifest, export  # noqa: F401

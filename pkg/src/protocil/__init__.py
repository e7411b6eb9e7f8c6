"""Prototype-classifier toolkit for class-incremental learning over fixed
feature embeddings, with baseline heads, feature-space diagnostics, and a
benchmark harness.

Submodules are imported lazily so the CLI can cap numerical thread pools
before numpy is first loaded.
"""

__version__ = "0.1.0"

_SUBMODULES = ("featureset", "ipc", "baselines", "diagnostics", "harness", "errors")


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")

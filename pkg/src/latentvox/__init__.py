"""latentvox: learned voxel geometry codec + compressed-domain classification.

Submodules are imported lazily (PEP 562) so the CLI can pin BLAS thread
counts via environment variables before numpy is first loaded.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "ExperimentConfig": ("latentvox.config", "ExperimentConfig"),
    "CodecConfig": ("latentvox.codec", "CodecConfig"),
    "CodecModel": ("latentvox.codec", "CodecModel"),
    "ClassifierModel": ("latentvox.classifier", "ClassifierModel"),
    "AdaptedClassifier": ("latentvox.adaptation", "AdaptedClassifier"),
    "Harness": ("latentvox.harness", "Harness"),
    "PointCloudV": ("latentvox.pcloud", "PointCloudV"),
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        import importlib
        module, attr = _EXPORTS[name]
        return getattr(importlib.import_module(module), attr)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")

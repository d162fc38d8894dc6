"""kinefuse: joint reconstruction of body kinematics, camera orientation,
and wearable-sensor calibration from monocular video and uncalibrated IMUs.

Submodules are imported lazily so the command-line front end can configure
the numerical backend (thread caps) before numpy loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = (
    "so3",
    "tape",
    "body",
    "trajectory",
    "sensors",
    "camera",
    "objective",
    "synth",
    "evaluation",
    "recording",
    "estimator",
    "binio",
    "cli",
)

__all__ = list(_SUBMODULES) + ["KinematicFusion", "__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        module = import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    if name == "KinematicFusion":
        from .estimator import KinematicFusion

        return KinematicFusion
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)

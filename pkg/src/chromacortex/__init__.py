"""chromacortex: desk-scale simulation of the emergence of color vision.

Pipeline: hyperspectral scenes -> parameterized retina encoder -> optic nerve
images -> self-supervised cortical decoder -> N-dimensional percepts, with
color dimensionality measured by simulated color matching and percepts
rendered to RGB through a fitted linear scope.
"""

from chromacortex.spectral import (
    BandGrid,
    DEFAULT_GRID,
    RgbImage,
    SceneRecipe,
    SpectralImage,
    Spectrum,
    load_spectral_image,
    save_spectral_image,
    synth_scene,
)

__version__ = "0.1.0"

__all__ = [
    "BandGrid",
    "DEFAULT_GRID",
    "RgbImage",
    "SceneRecipe",
    "SpectralImage",
    "Spectrum",
    "load_spectral_image",
    "save_spectral_image",
    "synth_scene",
    "__version__",
]

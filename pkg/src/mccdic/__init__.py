"""Multi-contrast convolutional dictionary model (MC-CDic).

Decomposes a reference image and a degraded target image into shared and
per-image convolutional sparse features with an alternating proximal-gradient
solver, and synthesizes the restored target from the shared and target-unique
features. Ships with MRI-style degradation simulators, classical dictionary
learning, quality metrics, synthetic phantoms and a CLI.
"""

__version__ = "0.1.0"

from mccdic.core import axpy, dot, load_mct, save_mct
from mccdic.degrade import (
    SamplingMask,
    fft2,
    ifft2,
    kspace_center_crop_lr,
    make_cartesian_mask,
    undersample,
    upsample_zero_pad,
)
from mccdic.dict_learn import LearnConfig, dict_gradient, learn, project_unit_ball
from mccdic.dictionary import (
    DictionaryBank,
    MultiScaleDictionary,
    StackedPair,
    UntiedPair,
    analyze,
    delta_bank,
    ms_analyze,
    ms_synthesize,
    operator_norm,
    random_bank,
    random_msdict,
    synthesize,
)
from mccdic.metrics import psnr, rmse, ssim
from mccdic.phantom import Ellipse, PhantomSpec, make_phantom_pair, random_phantom_spec
from mccdic.solver import (
    FeatureState,
    ModelDictionaries,
    SolverConfig,
    build_stacked_residual,
    init_features,
    iterate,
    load_model_dictionaries,
    objective_value,
    random_model_dictionaries,
    reconstruct,
    save_model_dictionaries,
    soft_threshold,
)

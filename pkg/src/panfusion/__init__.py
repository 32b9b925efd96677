"""Conditional-diffusion pansharpening on wavelet-conditioned UNets."""

from .tensorio import (ImageTensor, TensorFormatError, ManifestError,
                       ManifestEntry, DatasetManifest, read_tensor,
                       write_tensor, load_manifest, save_manifest)
from .schedule import NoiseSchedule, cosine_schedule, posterior_variance
from .diffusion import (Prediction, NoisyState, q_sample, single_forward_step,
                        make_v, to_x0, to_epsilon, simple_loss)
from .wavelet import WaveletBands, dwt_haar, idwt_haar
from .conditioning import (ConditionBundle, condition_bands, make_condition,
                           StyleModulation, WaveletModulation,
                           linear_cross_attention)
from .denoiser import (DenoiserConfig, Denoiser, Checkpoint, save_checkpoint,
                       load_checkpoint, count_params)
from .sampler import SamplerPlan, make_plan, ddpm_step, ddim_step, sample
from .datasim import (SynthConfig, FusionSample, wald_simulate, synth_dataset,
                      load_sample, mtf_downsample, poly23_upsample, entropy_bpp)
from .metrics import (MetricConfig, UndefinedMetricError, sam, ergas, psnr,
                      scc, ssim, uiqi, q_avg, d_lambda, d_s, qnr,
                      evaluate_reference, evaluate_non_reference)
from .trainer import (TrainConfig, TrainingDiverged, TrainResult, train,
                      load_denoiser, fuse_image, run_ablations)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

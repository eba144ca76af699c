"""Sequential attentive generative models.

Latents feed an LSTM whose outputs write, through spatial-transformer
attention, onto a multi-channel hidden canvas that is decoded into Bernoulli
pixel probabilities; inference reads the image with the same attention
machinery. Ships its own reverse-mode autodiff tape, a training harness,
and a CLI (``seqgen``).
"""

from .tensor import Tensor, Tape, ShapeError, conv2d_same, finite_difference_check
from .attention import (AffineParams, affine_grid, bilinear_sample, st_read,
                        st_write, multi_st_write, error_attention,
                        random_patch_params, location_to_params)
from .recurrent import LstmParams, LstmState, lstm_step, CgruWeights, cgru_step
from .model import (ModelConfig, StepTrace, FreeEnergyReport, SeqGenModel,
                    kl_gauss_std, bernoulli_loglik)
from .rng import RngStream

__version__ = "0.1.0"

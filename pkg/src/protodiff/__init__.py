"""Prototype-conditioned diffusion: generative model plus interpretability toolkit.

A patch-based prototype encoder summarizes an image as a vector of
similarity scores, which conditions a denoising diffusion model. The
package bundles the model, its two-stage training procedure, samplers
(ancestral and deterministic, with inversion), a closed-form verification
oracle for the training objective, interpretation tools (prototype
visualization, manipulation, interpolation, extrapolation, emergence
tracing), and quantitative evaluation (latent AUROC, disentanglement,
a Frechet-distance proxy, and a shortcut-learning diagnosis harness).
"""

__version__ = "0.1.0"

"""Text-conditional 3D phantom synthesis at desk scale.

Three trainable stages compose the pipeline: a categorical diffusion model
that synthesizes semantic label volumes from structured prompts, a
window-randomized HDR autoencoder for intensity volumes, and a Gaussian
latent diffusion model guided by semantics and text. All stages train and
sample on procedurally generated torso phantoms.
"""

__version__ = "0.1.0"

__all__ = [
    "SemanticSynthesizer",
    "HdrAutoencoder",
    "LatentGenerator",
    "PipelineSampler",
    "PhantomSpec",
    "generate_case",
]


def __getattr__(name):
    # Lazy so that low-level modules import without pulling the whole stack.
    if name in ("SemanticSynthesizer", "HdrAutoencoder", "LatentGenerator", "PipelineSampler"):
        from guidegen import estimators

        return getattr(estimators, name)
    if name in ("PhantomSpec", "generate_case"):
        from guidegen import phantoms

        return getattr(phantoms, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")

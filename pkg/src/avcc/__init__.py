"""avcc: a joint audio-visual neural codec at desk scale.

Face video and speech are compressed into a shared bitstream (identity latent,
quantized motion coefficients, audio tokens) and reconstructed by one diffusion
decoder in which the two modalities attend to each other. Entropy coding,
container format, training loop and evaluation harness are included; the
``avcc`` CLI drives the full pipeline.
"""

__version__ = "0.1.0"

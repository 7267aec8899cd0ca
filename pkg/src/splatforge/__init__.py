"""splatforge: occlusion-aware 3D Gaussian splat scene synthesis driven by
pluggable denoiser backends (in-process mocks or a remote wire protocol)."""

__version__ = "0.1.0"

"""synthrad: prompt-conditioned synthetic chest X-ray generation in plain numpy.

Modules:
    autodiff    tape-based reverse-mode tensors and operators
    diffusion   noise schedule, conditional U-Net denoiser, training and sampling
    pggan       progressively grown GAN with fade-in
    data        metadata/bbox parsing, prompts, splits, toy dataset
    evaluation  classifier and real-vs-synthetic augmentation experiment
    checkpoint  binary checkpoint format
    cli         ``synthrad`` command line
"""

__version__ = "0.1.0"

"""Desk-scale conditional flow-matching style transfer with detector auditing.

Subpackage map: tensor/optim/rng (numerics core), schedule (noise process),
vocab/corpus (synthetic data), embedding/backbone/conditioning/model (the
denoiser), detector (toy classifiers), trainflow (training), sampler
(noise-then-denoise inference), rateaudit (document scheduling), evalkit
(metrics and reports), experiment (the cached end-to-end pipeline), cli.
"""

__version__ = "0.1.0"

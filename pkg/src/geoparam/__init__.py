"""Generative parametrization of channelized permeability fields.

Submodules:

* :mod:`geoparam.autodiff` -- reverse-mode tensors, convolutions, Adam
* :mod:`geoparam.gan` -- generator/critic networks, WGAN training, checkpoints
* :mod:`geoparam.geodata` -- raster I/O, procedural channel sampler, conditioning audit, PCA
* :mod:`geoparam.flowsim` -- two-phase incompressible flow (TPFA pressure, upwind transport)
* :mod:`geoparam.uqstats` -- ensemble moments, histograms, two-point probability
* :mod:`geoparam.nes` -- natural evolution strategies and history matching
* :mod:`geoparam.cli` -- the ``geoparam`` command
"""

__version__ = "0.1.0"

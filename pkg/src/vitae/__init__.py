"""VAE, beta-VAE and VITAE models on a small numpy autodiff engine.

Submodules: ``tensor`` (autodiff), ``transforms`` and ``cpab`` (planar
transformations), ``spatial`` (the spatial-transformer layer), ``models``,
``losses``, ``data``, ``metrics``, ``optim`` and ``cli``.
"""

__version__ = "0.1.0"

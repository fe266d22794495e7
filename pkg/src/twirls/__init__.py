"""Graph propagation layers unfolded from proximal gradient descent on a
graph-regularized energy, with attention derived from iteratively
reweighted least squares on a robust version of that energy.

Submodules:

- ``graph``: sparse graph container and Laplacian operators
- ``penalty``: robust penalty family, attention scores, concave conjugates
- ``energy``: quadratic, robust and surrogate energies
- ``propagation``: unfolded steps, closed form, SGC reference
- ``autodiff``: reverse-mode tape used for training
- ``model``: MLP + propagation model, Adam training, checkpoints
- ``data``: dataset format, synthetic generators, edge perturbation
- ``harness``: experiment configs, sweeps and studies

The package root stays import-light so that ``--threads`` can configure BLAS
before numpy loads.
"""

__version__ = "0.1.0"

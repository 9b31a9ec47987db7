"""
Mesh-free reduced elastodynamics with neural skinning weights.

Submodules
----------
occupancy    geometry sources, interior sampling, volume
mlp          the weight network, Adam, checkpoints
elastic      skinning map, deformation gradients, energies
training     fitting the weight network
reduced_sim  cubature, implicit time stepping, contact
linalg       dense Cholesky and symmetric eigensolvers
scene, export, cli
             scene files, exporters and the command line
"""

__version__ = '0.1.0'

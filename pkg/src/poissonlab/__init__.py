"""poissonlab: a numerical laboratory for boundary-data identification problems.

Submodules
----------
geometry        metric fields, Christoffel symbols, symmetric-matrix algebra
mesh            triangulated disks, structured grids, FEM assembly
harmonic        Dirichlet solves, DN maps, harmonic-measure rows
runge           regularized least-squares control of boundary/interior data
calderon        embedding clouds, correspondence maps, morphism checks
metric_recovery reconstruction of the metric from harmonic functions
quasilinear     quasilinear operators, Newton solves, coefficient probing
scenarios       deterministic experiment library
cli             command-line entry points
"""

__version__ = "0.1.0"

"""Solver toolkit for 3D-1D mixed-dimensional elliptic problems.

The package assembles coupled finite-element systems for an elliptic
equation on the unit cube coupled to a 1D metric graph, solves them with
a flexible restarted GMRES, and provides three families of right
preconditioners for the reduced 3D operator: ILU(0), geometric multigrid,
and a trainable convolutional network that maps residuals (paired with
the graph's distance field) to approximate corrections.

Modules
-------
geometry   embedded 1D graphs, structured grids, distance fields
assembly   FEM blocks of the coupled system, reduced operator and rhs
krylov     sparse solver kernel: FGMRES, ILU(0), Jacobi, geometric MG
neural     dense tensor ops with hand-written adjoints, the U-net, Adam
training   training-set construction, unsupervised risk minimization
analysis   spectral diagnostics: direct DFT, partial SVD, reports
harness    experiment runners and CSV reporting behind the CLI
"""

__version__ = "0.1.0"
